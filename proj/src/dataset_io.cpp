#include "cfkd/dataset_io.hpp"

#include <cstdio>

#include "cfkd/errors.hpp"
#include "cfkd/io_util.hpp"
#include "cfkd/png.hpp"
#include "json.hpp"

namespace cfkd::square {

namespace {

using nlohmann::json;
constexpr const char* kFormat = "cfkd-square-v1";

struct SplitRef {
  const char* name;
  std::vector<GroupedExample> Dataset::*member;
};
constexpr SplitRef kSplits[] = {{"train", &Dataset::train}, {"val", &Dataset::val}, {"test", &Dataset::test}};

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  const auto& s = d.spec;
  json m = {{"format", kFormat},
            {"spec",
             {{"n_samples", s.n_samples},
              {"correlation", s.correlation},
              {"image_size", s.image_size},
              {"square_size", s.square_size},
              {"two_confounders", s.two_confounders},
              {"split", {{"train", s.split.train}, {"val", s.split.val}, {"test", s.split.test}}}}},
            {"seed", s.seed}};
  std::vector<std::uint8_t> images, meta;
  const std::size_t pixels = s.image_size * s.image_size;
  for (const auto& sp : kSplits) {
    json ids = json::array();
    for (const auto& e : d.*sp.member) {
      if (e.image.size() != pixels) throw ShapeError("example image does not match the spec's image size");
      ids.push_back(e.id);
      for (double v : e.image.values()) io::put_f64(images, v);
      io::put_i32(meta, static_cast<std::int32_t>(e.id));
      io::put_i32(meta, e.label);
      io::put_i32(meta, static_cast<std::int32_t>(index(e.group)));
      io::put_f64(meta, e.latent.fg);
      io::put_f64(meta, e.latent.bg);
      io::put_f64(meta, e.latent.x);
      io::put_f64(meta, e.latent.y);
      io::put_f64(meta, e.latent.bg2.value_or(-1.0));
    }
    m["splits"][sp.name] = ids;
  }
  io::write_atomic(dir / "images.bin", images);
  io::write_atomic(dir / "meta.bin", meta);
  io::write_atomic(dir / "manifest.json", m.dump(2));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw Error((dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.value("format", "") != kFormat) throw Error((dir / "manifest.json").string() + ": unknown format");
  Dataset d;
  auto& s = d.spec;
  const json& js = m.at("spec");
  s.n_samples = js.at("n_samples");
  s.correlation = js.at("correlation");
  s.image_size = js.at("image_size");
  s.square_size = js.at("square_size");
  s.two_confounders = js.at("two_confounders");
  s.split = {js.at("split").at("train"), js.at("split").at("val"), js.at("split").at("test")};
  s.seed = m.at("seed");
  const auto images = io::read_bytes(dir / "images.bin");
  const auto meta = io::read_bytes(dir / "meta.bin");
  const Geometry geo = s.geometry();
  const std::size_t pixels = geo.pixels();
  std::size_t io_off = 0, meta_off = 0;
  for (const auto& sp : kSplits) {
    const auto& ids = m.at("splits").at(sp.name);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (images.size() < io_off + pixels * 8 || meta.size() < meta_off + 12 + 40) {
        throw Error(dir.string() + ": binary files are shorter than the manifest says");
      }
      std::vector<double> px(pixels);
      for (auto& v : px) v = io::get_f64(images, io_off);
      GroupedExample e;
      e.id = static_cast<std::size_t>(io::get_i32(meta, meta_off));
      e.label = io::get_i32(meta, meta_off);
      const int g = io::get_i32(meta, meta_off);
      e.latent.fg = io::get_f64(meta, meta_off);
      e.latent.bg = io::get_f64(meta, meta_off);
      e.latent.x = io::get_f64(meta, meta_off);
      e.latent.y = io::get_f64(meta, meta_off);
      const double bg2 = io::get_f64(meta, meta_off);
      if (s.two_confounders) e.latent.bg2 = bg2;
      if (e.id != ids[k].get<std::size_t>()) throw Error(dir.string() + ": example ids disagree with the manifest");
      GroupedExample rebuilt = make_example(e.id, e.latent, e.label, geo);
      if (index(rebuilt.group) != static_cast<std::size_t>(g)) throw Error(dir.string() + ": stored group mismatch");
      rebuilt.image = Tensor(rebuilt.image.shape(), std::move(px));
      (d.*sp.member).push_back(std::move(rebuilt));
    }
  }
  if (io_off != images.size() || meta_off != meta.size()) throw Error(dir.string() + ": trailing data in binary files");
  return d;
}

void export_pngs(const std::filesystem::path& dir, const Dataset& d, std::size_t scale) {
  const std::size_t side = d.spec.image_size;
  for (const auto& sp : kSplits) {
    for (const auto& e : d.*sp.member) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%05zu.png", sp.name, e.id);
      png::write_file(dir / name, png::upscale(png::from_unit_gray(e.image.values(), side, side), scale));
    }
  }
}

}  // namespace cfkd::square
