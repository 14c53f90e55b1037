#pragma once

// Pseudo-RGB formatting of non-optical sensors.

#include <string>
#include <vector>

#include "sapfuse/tensor.hpp"

namespace sapfuse::sensor {

enum class SensorKind { sar, multispectral, optical };

struct RawSensorImage {
  Tensor bands;  // C×H×W
  SensorKind sensor = SensorKind::optical;
};

enum class SarPadMode { zero_pad, replicate };
enum class BandGrouping { triplet, single };

std::string to_string(SarPadMode m);
SarPadMode parse_sar_pad_mode(const std::string& name);
std::string to_string(BandGrouping g);
BandGrouping parse_band_grouping(const std::string& name);

/// Source band feeding each of a frame's three channels; -1 marks zero fill.
using ChannelSources = std::vector<int>;

struct FrameSequence {
  std::vector<Tensor> frames;            // each 3×H×W
  std::vector<ChannelSources> ordering;  // per frame
};

/// Brings a 1- or 2-band SAR image to three channels. zero_pad appends zero
/// channels; replicate cycles through the existing bands. Three-band input is
/// returned unchanged.
Tensor pad_sar(const RawSensorImage& img, SarPadMode mode = SarPadMode::zero_pad);

/// Which source band fills each output channel of pad_sar.
ChannelSources sar_channel_sources(std::size_t bands, SarPadMode mode);

/// Splits multispectral bands into 3-channel frames: consecutive triples
/// (last one zero-filled) or one zero-padded frame per band.
FrameSequence group_bands(const RawSensorImage& img, BandGrouping mode = BandGrouping::triplet);

}  // namespace sapfuse::sensor
