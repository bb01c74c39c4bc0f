#pragma once

// On-disk form of a Square dataset: manifest.json (spec, seed, split ids),
// images.bin (f64 pixels) and meta.bin (labels, groups, latents).

#include <filesystem>

#include "cfkd/squareworld.hpp"

namespace cfkd::square {

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Throws cfkd::Error on a missing or inconsistent file.
Dataset load_dataset(const std::filesystem::path& dir);
/// One PNG per example, named <split>_<id>.png.
void export_pngs(const std::filesystem::path& dir, const Dataset& dataset, std::size_t scale = 4);

}  // namespace cfkd::square
