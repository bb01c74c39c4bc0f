#include "cfkd/squareworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "cfkd/errors.hpp"
#include "cfkd/random.hpp"

namespace cfkd::square {

namespace {

double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

long rounded_position(double v, const Geometry& g) {
  const long p = std::lround(v);
  return std::clamp(p, 0L, static_cast<long>(g.image_size - g.square_size));
}

// Edge profile along one axis for a square starting at `start`.
void axis_profile(double start, const Geometry& g, double temperature, std::vector<double>& prof,
                  std::vector<double>& dprof) {
  const auto n = g.image_size;
  const auto side = static_cast<double>(g.square_size);
  prof.resize(n);
  dprof.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = static_cast<double>(k) + 0.5;
    const double sa = sigmoid((u - start) / temperature);
    const double sb = sigmoid((start + side - u) / temperature);
    prof[k] = sa * sb;
    dprof[k] = prof[k] * (sa - sb) / temperature;
  }
}

struct Streams {
  Rng cls, align, fg, bg, pos, align2, bg2;
  explicit Streams(std::uint64_t seed)
      : cls(derive_seed(seed, "class")),
        align(derive_seed(seed, "align")),
        fg(derive_seed(seed, "fg")),
        bg(derive_seed(seed, "bg")),
        pos(derive_seed(seed, "pos")),
        align2(derive_seed(seed, "align2")),
        bg2(derive_seed(seed, "bg2")) {}
};

double confounder_intensity(Rng& rng, bool positive) {
  const Range r = positive ? kConfounderPos : kConfounderNeg;
  return uniform(rng, r.lo, r.hi);
}

std::vector<GroupedExample> draw(const DatasetSpec& spec, std::size_t count, double correlation, std::uint64_t seed) {
  const Geometry geo = spec.geometry();
  const double a = 0.5 * (1.0 + correlation);
  Streams s(seed);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> position(0, static_cast<int>(spec.image_size - spec.square_size));
  std::vector<GroupedExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = coin(s.cls);
    // c = 1 must empty the minority groups exactly, so compare with '<'.
    const bool aligned = uniform(s.align, 0.0, 1.0) < a;
    const bool conf = aligned ? (label == kClassW2) : (label == kClassW1);
    LatentPoint z;
    const Range fr = kForeground[static_cast<std::size_t>(label)];
    z.fg = uniform(s.fg, fr.lo, fr.hi);
    z.bg = confounder_intensity(s.bg, conf);
    z.x = position(s.pos);
    z.y = position(s.pos);
    if (spec.two_confounders) {
      const bool aligned2 = uniform(s.align2, 0.0, 1.0) < a;
      const bool conf2 = aligned2 ? (label == kClassW2) : (label == kClassW1);
      z.bg2 = confounder_intensity(s.bg2, conf2);
    }
    out.push_back(make_example(i, z, label, geo));
  }
  return out;
}

Dataset split(const DatasetSpec& spec, std::vector<GroupedExample> all) {
  Dataset d;
  d.spec = spec;
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(spec.seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = all.size();
  const auto n_train = static_cast<std::size_t>(std::llround(spec.split.train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(spec.split.val * static_cast<double>(n))));
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train),
            order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < n_train ? d.train : (k < n_train + n_val ? d.val : d.test);
    dst.push_back(std::move(all[order[k]]));
  }
  return d;
}

}  // namespace

const char* group_name(Group g) noexcept {
  switch (g) {
    case Group::w1_pos: return "w1+";
    case Group::w1_neg: return "w1-";
    case Group::w2_pos: return "w2+";
    case Group::w2_neg: return "w2-";
  }
  return "?";
}

void DatasetSpec::validate() const {
  if (n_samples < 4) throw ConfigError("dataset needs at least 4 samples, got " + std::to_string(n_samples));
  if (!(correlation >= 0.0 && correlation <= 1.0)) throw ConfigError("correlation must lie in [0, 1]");
  if (square_size == 0 || square_size >= image_size) throw ConfigError("square_size must be in [1, image_size)");
  if (two_confounders && image_size < 2 * 2 + 1) throw ConfigError("image too small for a border frame");
  const double total = split.train + split.val + split.test;
  if (split.train < 0 || split.val < 0 || split.test < 0 || std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  }
}

Dataset sample_dataset(const DatasetSpec& spec) {
  spec.validate();
  return split(spec, draw(spec, spec.n_samples, spec.correlation, spec.seed));
}

Dataset oracle_dataset(const DatasetSpec& spec) {
  DatasetSpec s = spec;
  s.correlation = 0.0;
  return sample_dataset(s);
}

std::vector<GroupedExample> sample_examples(const DatasetSpec& spec, std::size_t count) {
  DatasetSpec s = spec;
  s.n_samples = std::max<std::size_t>(count, 4);
  s.validate();
  return draw(s, count, s.correlation, s.seed);
}

Tensor render(const LatentPoint& z, const Geometry& g, RenderMode mode, double temperature) {
  const std::size_t n = g.image_size;
  Tensor img({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      img.at(r, c) = (z.bg2 && g.in_frame(r, c)) ? *z.bg2 : z.bg;
    }
  }
  if (mode == RenderMode::hard) {
    const auto x0 = static_cast<std::size_t>(rounded_position(z.x, g));
    const auto y0 = static_cast<std::size_t>(rounded_position(z.y, g));
    for (std::size_t r = y0; r < y0 + g.square_size; ++r) {
      for (std::size_t c = x0; c < x0 + g.square_size; ++c) img.at(r, c) = z.fg;
    }
    return img;
  }
  if (!(temperature > 0.0)) throw Error("soft render needs a positive temperature");
  std::vector<double> px, dpx, py, dpy;
  axis_profile(z.x, g, temperature, px, dpx);
  axis_profile(z.y, g, temperature, py, dpy);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double base = img.at(r, c);
      img.at(r, c) = base + (z.fg - base) * px[c] * py[r];
    }
  }
  return img;
}

std::size_t latent_dims(const LatentPoint& z) noexcept { return z.bg2 ? 5 : 4; }

std::vector<double> latent_to_vector(const LatentPoint& z) {
  std::vector<double> v{z.fg, z.bg, z.x, z.y};
  if (z.bg2) v.push_back(*z.bg2);
  return v;
}

LatentPoint latent_from_vector(std::span<const double> v) {
  if (v.size() != 4 && v.size() != 5) throw ShapeError("latent vector must have 4 or 5 entries");
  LatentPoint z{v[0], v[1], v[2], v[3], std::nullopt};
  if (v.size() == 5) z.bg2 = v[4];
  return z;
}

void soft_render_vjp(const LatentPoint& z, const Geometry& g, double temperature, std::span<const double> pixel_grad,
                     std::span<double> latent_grad) {
  if (!(temperature > 0.0)) throw Error("soft render needs a positive temperature");
  if (pixel_grad.size() != g.pixels()) throw ShapeError("pixel gradient size does not match geometry");
  if (latent_grad.size() != latent_dims(z)) throw ShapeError("latent gradient size mismatch");
  std::vector<double> px, dpx, py, dpy;
  axis_profile(z.x, g, temperature, px, dpx);
  axis_profile(z.y, g, temperature, py, dpy);
  double dfg = 0, dbg = 0, dx = 0, dy = 0, dbg2 = 0;
  const std::size_t n = g.image_size;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double gp = pixel_grad[r * n + c];
      if (gp == 0.0) continue;
      const bool frame = z.bg2 && g.in_frame(r, c);
      const double base = frame ? *z.bg2 : z.bg;
      const double prof = px[c] * py[r];
      dfg += gp * prof;
      (frame ? dbg2 : dbg) += gp * (1.0 - prof);
      const double amp = gp * (z.fg - base);
      dx += amp * py[r] * dpx[c];
      dy += amp * px[c] * dpy[r];
    }
  }
  latent_grad[0] = dfg;
  latent_grad[1] = dbg;
  latent_grad[2] = dx;
  latent_grad[3] = dy;
  if (z.bg2) latent_grad[4] = dbg2;
}

CausalMask causal_mask(const LatentPoint& z, const Geometry& g) {
  CausalMask m;
  m.values.assign(g.pixels(), -1);
  const auto x0 = static_cast<std::size_t>(rounded_position(z.x, g));
  const auto y0 = static_cast<std::size_t>(rounded_position(z.y, g));
  for (std::size_t r = y0; r < y0 + g.square_size; ++r) {
    for (std::size_t c = x0; c < x0 + g.square_size; ++c) m.values[r * g.image_size + c] = 1;
  }
  return m;
}

GroupedExample make_example(std::size_t id, const LatentPoint& latent, int label, const Geometry& geometry) {
  GroupedExample e;
  e.id = id;
  e.latent = latent;
  e.label = label;
  e.confounder = latent.bg >= kConfounderThreshold;
  if (latent.bg2) e.confounder2 = *latent.bg2 >= kConfounderThreshold;
  e.group = group_of(label, e.confounder);
  e.image = render(latent, geometry, RenderMode::hard);
  e.mask = causal_mask(latent, geometry);
  return e;
}

std::array<std::size_t, kNumGroups> group_counts(std::span<const GroupedExample> examples) {
  std::array<std::size_t, kNumGroups> counts{};
  for (const auto& e : examples) ++counts[index(e.group)];
  return counts;
}

std::uint64_t dataset_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t k = 0; k < n; ++k) {
      h ^= b[k];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    const std::uint64_t marker = split->size();
    feed(&marker, sizeof marker);
    for (const auto& e : *split) {
      const std::int32_t meta[3] = {static_cast<std::int32_t>(e.id), e.label, static_cast<std::int32_t>(e.group)};
      feed(meta, sizeof meta);
      feed(e.image.data(), e.image.size() * sizeof(double));
    }
  }
  return h;
}

}  // namespace cfkd::square
