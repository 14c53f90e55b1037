#include "sapfuse/sensor_format.hpp"

#include <algorithm>

namespace sapfuse::sensor {

std::string to_string(SarPadMode m) { return m == SarPadMode::zero_pad ? "zero_pad" : "replicate"; }

SarPadMode parse_sar_pad_mode(const std::string& name) {
  if (name == "zero_pad") return SarPadMode::zero_pad;
  if (name == "replicate") return SarPadMode::replicate;
  throw DomainError("unknown SAR padding mode '" + name + "'");
}

std::string to_string(BandGrouping g) { return g == BandGrouping::triplet ? "triplet" : "single"; }

BandGrouping parse_band_grouping(const std::string& name) {
  if (name == "triplet") return BandGrouping::triplet;
  if (name == "single") return BandGrouping::single;
  throw DomainError("unknown band grouping '" + name + "'");
}

namespace {

void require_bands(const Tensor& bands) {
  if (bands.rank() != 3) throw DimensionError("sensor image must be C×H×W, got " + shape_string(bands.shape()));
}

Tensor assemble(const Tensor& bands, const ChannelSources& sources) {
  const std::size_t h = bands.dim(1), w = bands.dim(2), plane = h * w;
  Tensor out({3, h, w});
  auto src = bands.data();
  auto dst = out.data();
  for (std::size_t c = 0; c < 3; ++c) {
    if (sources[c] < 0) continue;
    auto from = src.subspan(static_cast<std::size_t>(sources[c]) * plane, plane);
    std::copy(from.begin(), from.end(), dst.begin() + c * plane);
  }
  return out;
}

}  // namespace

ChannelSources sar_channel_sources(std::size_t bands, SarPadMode mode) {
  if (bands == 0 || bands > 3) {
    throw DomainError("pad_sar: SAR input must have 1 or 2 channels, got " + std::to_string(bands));
  }
  ChannelSources s(3, -1);
  for (std::size_t c = 0; c < 3; ++c) {
    if (c < bands) {
      s[c] = static_cast<int>(c);
    } else if (mode == SarPadMode::replicate) {
      s[c] = static_cast<int>(c % bands);
    }
  }
  return s;
}

Tensor pad_sar(const RawSensorImage& img, SarPadMode mode) {
  require_bands(img.bands);
  const std::size_t c = img.bands.dim(0);
  if (c == 3) return img.bands;
  return assemble(img.bands, sar_channel_sources(c, mode));
}

FrameSequence group_bands(const RawSensorImage& img, BandGrouping mode) {
  require_bands(img.bands);
  const int c = static_cast<int>(img.bands.dim(0));
  FrameSequence seq;
  if (mode == BandGrouping::triplet) {
    for (int start = 0; start < c; start += 3) {
      ChannelSources s(3, -1);
      for (int k = 0; k < 3 && start + k < c; ++k) s[k] = start + k;
      seq.frames.push_back(assemble(img.bands, s));
      seq.ordering.push_back(s);
    }
  } else {
    for (int b = 0; b < c; ++b) {
      const ChannelSources s{b, -1, -1};
      seq.frames.push_back(assemble(img.bands, s));
      seq.ordering.push_back(s);
    }
  }
  return seq;
}

}  // namespace sapfuse::sensor
