// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::corpus {
namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(a * 0x100000001b3ULL + b)));
}

struct Blob {
  double cx, cy, sigma, amp;
};

double eval_blobs(const std::vector<Blob>& blobs, double u, double v) {
  double s = 0;
  for (const auto& b : blobs) {
    const double du = u - b.cx, dv = v - b.cy;
    s += b.amp * std::exp(-(du * du + dv * dv) / (2 * b.sigma * b.sigma));
  }
  return s;
}

struct ClassPattern {
  std::vector<Blob> blobs;
  double theta = 0, freq = 0, phase = 0;

  double at(double u, double v) const {
    double s = eval_blobs(blobs, u, v);
    s += 0.3 * std::sin(2 * std::numbers::pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
    return std::tanh(s);
  }
};

ClassPattern make_class_pattern(std::uint64_t seed, int cls, int n_classes) {
  auto rng = stream(seed, 0xC1A55, static_cast<std::uint64_t>(cls));
  std::uniform_real_distribution<double> pos(0.2, 0.8), sig(0.06, 0.12), amp(0.5, 1.0), jitter(-0.1, 0.1),
      freq(3.0, 6.0), phase(0, 2 * std::numbers::pi);
  std::bernoulli_distribution sign(0.5);
  ClassPattern p;
  for (int i = 0; i < 3; ++i) p.blobs.push_back({pos(rng), pos(rng), sig(rng), (sign(rng) ? 1.0 : -1.0) * amp(rng)});
  p.theta = std::numbers::pi * cls / n_classes + jitter(rng);
  p.freq = freq(rng);
  p.phase = phase(rng);
  return p;
}

// Per-modality rendering: geometry, contrast curve and channel mix.
struct ModalityStyle {
  int geometry;  // 0 identity, 1 horizontal flip, 2 transpose, 3 rotate 180
  bool blur;
  int curve;  // 0 linear, 1 gamma 0.6, 2 inverted, 3 sigmoid
  std::array<double, 3> mix;
};

ModalityStyle style_for(std::size_t m) {
  static const std::array<ModalityStyle, 4> styles = {{
      {0, false, 0, {1.0, 0.6, 0.35}},
      {1, true, 1, {0.8, 0.9, 1.0}},
      {2, false, 2, {0.3, 1.0, 0.3}},
      {3, true, 3, {0.4, 0.4, 1.0}},
  }};
  ModalityStyle s = styles[m % styles.size()];
  if (m >= styles.size()) {
    // Further modalities rotate the channel mix so every style stays distinct.
    const auto r = static_cast<int>((m / styles.size()) % 3);
    std::rotate(s.mix.begin(), s.mix.begin() + r, s.mix.end());
  }
  return s;
}

double apply_curve(int curve, double x) {
  x = std::clamp(x, 0.0, 1.0);
  switch (curve) {
    case 1: return std::pow(x, 0.6);
    case 2: return 1.0 - x;
    case 3: return 1.0 / (1.0 + std::exp(-8.0 * (x - 0.5)));
    default: return x;
  }
}

std::string patient_id_for(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%05d", i);
  return buf;
}

}  // namespace

Modality::Modality(std::string tag) : tag_(std::move(tag)) {
  if (tag_.empty()) throw ConfigError("modality tag must be non-empty");
  for (unsigned char c : tag_)
    if (std::islower(c) || std::isspace(c))
      throw ConfigError("modality tag '" + tag_ + "' must be uppercase without spaces");
}

std::vector<Modality> default_modalities() {
  return {Modality("CFP"), Modality("OCT"), Modality("FFA"), Modality("ICGA"), Modality("FAF")};
}

std::vector<float> ImageRecord::to_float() const {
  std::vector<float> out(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = value(i);
  return out;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

void CorpusManifest::validate() const {
  if (modality_set.empty()) throw ValidationError("corpus declares no modalities");
  std::set<Modality> mods(modality_set.begin(), modality_set.end());
  if (mods.size() != modality_set.size()) throw ValidationError("duplicate modality tag in modality_set");

  std::map<std::string, Split> patient_split;
  std::set<std::string> image_ids;
  for (const auto& p : records) {
    if (p.patient_id.empty()) throw ValidationError("record with empty patient_id");
    auto [it, inserted] = patient_split.emplace(p.patient_id, p.split);
    if (!inserted) {
      if (it->second != p.split)
        throw ValidationError("patient " + p.patient_id + " appears in splits " + std::string(to_string(it->second)) +
                              " and " + std::string(to_string(p.split)));
      throw ValidationError("duplicate patient record " + p.patient_id);
    }
    if (p.keywords && p.keywords->empty()) throw ValidationError("patient " + p.patient_id + " has an empty keyword set");
    if (p.latent_class && (*p.latent_class < 0 || (!class_names.empty() && *p.latent_class >= static_cast<int>(class_names.size()))))
      throw ValidationError("patient " + p.patient_id + " has latent_class out of range");
    for (const auto& img : p.images) {
      if (img.image_id.empty()) throw ValidationError("image with empty id in patient " + p.patient_id);
      if (!image_ids.insert(img.image_id).second) throw ValidationError("duplicate image_id " + img.image_id);
      if (img.patient_id != p.patient_id)
        throw ValidationError("image " + img.image_id + " carries patient_id " + img.patient_id + " inside patient " + p.patient_id);
      if (!mods.count(img.modality))
        throw ValidationError("image " + img.image_id + " has undeclared modality " + img.modality.tag());
      if (img.height <= 0 || img.width <= 0 || img.channels <= 0 ||
          img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
        throw ValidationError("image " + img.image_id + " has inconsistent pixel dimensions");
    }
  }
}

std::vector<const PatientRecord*> CorpusManifest::patients(Split s) const {
  std::vector<const PatientRecord*> out;
  for (const auto& p : records)
    if (p.split == s) out.push_back(&p);
  return out;
}

std::size_t CorpusManifest::image_count() const {
  std::size_t n = 0;
  for (const auto& p : records) n += p.images.size();
  return n;
}

std::vector<std::pair<const ImageRecord*, const ImageRecord*>> pair_examinations(const PatientRecord& patient) {
  std::vector<const ImageRecord*> sorted;
  for (const auto& img : patient.images) sorted.push_back(&img);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->image_id < b->image_id; });
  std::vector<std::pair<const ImageRecord*, const ImageRecord*>> pairs;
  for (std::size_t i = 0; i < sorted.size(); ++i)
    for (std::size_t j = i + 1; j < sorted.size(); ++j)
      if (sorted[i]->modality != sorted[j]->modality) pairs.emplace_back(sorted[i], sorted[j]);
  return pairs;
}

void GeneratorConfig::validate() const {
  if (n_latent_classes < 2) throw ConfigError("n_latent_classes must be >= 2");
  if (n_latent_classes > static_cast<int>(synthetic_classes().size()))
    throw ConfigError("n_latent_classes must be <= " + std::to_string(synthetic_classes().size()));
  if (modality_set.size() < 2) throw ConfigError("modality_set must contain at least 2 modalities");
  std::set<Modality> mods(modality_set.begin(), modality_set.end());
  if (mods.size() != modality_set.size()) throw ConfigError("modality_set contains duplicates");
  if (!(text_fraction >= 0.0 && text_fraction <= 1.0)) throw ConfigError("text_fraction must lie in [0, 1]");
  if (n_val < 0 || n_test < 0 || n_patients - n_val - n_test < 1)
    throw ConfigError("n_patients must exceed n_val + n_test");
  if (images_per_patient_per_modality < 1) throw ConfigError("images_per_patient_per_modality must be >= 1");
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
}

const std::vector<SyntheticClass>& synthetic_classes() {
  static const std::vector<SyntheticClass> classes = [] {
    const std::vector<std::string> reports = {
        "normal fundus, no abnormality detected",
        "mild diabetic retinopathy noted with scattered microaneurysms",
        "suspected glaucoma with enlarged cup to disc ratio",
        "age-related macular degeneration with soft drusen",
        "branch retinal vein occlusion with flame haemorrhages",
        "severe non-proliferative diabetic retinopathy",
        "pathologic myopia with peripapillary atrophy",
        "central serous chorioretinopathy with subretinal fluid",
    };
    std::vector<SyntheticClass> out;
    for (const auto& r : reports) out.push_back({r, text::extract_keywords(r, text::KeywordDictionary::builtin())});
    return out;
  }();
  return classes;
}

CorpusManifest generate_synthetic_corpus(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int n_classes = cfg.n_latent_classes;
  const int size = cfg.image_size;
  constexpr int kChannels = 3;

  std::vector<ClassPattern> patterns;
  for (int c = 0; c < n_classes; ++c) patterns.push_back(make_class_pattern(seed, c, n_classes));

  CorpusManifest m;
  m.modality_set = cfg.modality_set;
  m.generator_seed = seed;
  for (int c = 0; c < n_classes; ++c) m.class_names.push_back(text::keywords_to_text(synthetic_classes()[c].keywords));

  const int n_train = cfg.n_patients - cfg.n_val - cfg.n_test;
  std::vector<double> intensity(static_cast<std::size_t>(size) * size);
  std::vector<double> scratch(intensity.size());

  for (int i = 0; i < cfg.n_patients; ++i) {
    auto rng = stream(seed, 0x9A71E47ULL, static_cast<std::uint64_t>(i));
    std::uniform_int_distribution<int> cls_dist(0, n_classes - 1), shift(-3, 3);
    std::uniform_real_distribution<double> amp(0.75, 1.25), pos(0.15, 0.85), sig(0.08, 0.16), namp(0.2, 0.35);
    std::bernoulli_distribution sign(0.5);
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

    PatientRecord p;
    p.patient_id = patient_id_for(i);
    p.split = i < n_train ? Split::train : (i < n_train + cfg.n_val ? Split::val : Split::test);
    const int cls = cls_dist(rng);
    p.latent_class = cls;
    const double a = amp(rng);
    const double dx = shift(rng) / static_cast<double>(size), dy = shift(rng) / static_cast<double>(size);
    std::vector<Blob> nuisance;
    for (int k = 0; k < 2; ++k) nuisance.push_back({pos(rng), pos(rng), sig(rng), (sign(rng) ? 1.0 : -1.0) * namp(rng)});

    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x + 0.5) / size, v = (y + 0.5) / size;
        intensity[static_cast<std::size_t>(y) * size + x] =
            0.5 + 0.45 * a * patterns[cls].at(u - dx, v - dy) + eval_blobs(nuisance, u, v);
      }

    for (std::size_t mi = 0; mi < cfg.modality_set.size(); ++mi) {
      const ModalityStyle style = style_for(mi);
      // Geometry, then optional 3x3 box blur, then the contrast curve.
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          int sx = x, sy = y;
          switch (style.geometry) {
            case 1: sx = size - 1 - x; break;
            case 2: sx = y; sy = x; break;
            case 3: sx = size - 1 - x; sy = size - 1 - y; break;
            default: break;
          }
          scratch[static_cast<std::size_t>(y) * size + x] = intensity[static_cast<std::size_t>(sy) * size + sx];
        }
      std::vector<double> shaped = scratch;
      if (style.blur) {
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            double s = 0;
            int n = 0;
            for (int oy = -1; oy <= 1; ++oy)
              for (int ox = -1; ox <= 1; ++ox) {
                const int yy = y + oy, xx = x + ox;
                if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
                s += scratch[static_cast<std::size_t>(yy) * size + xx];
                ++n;
              }
            shaped[static_cast<std::size_t>(y) * size + x] = s / n;
          }
      }
      for (int r = 0; r < cfg.images_per_patient_per_modality; ++r) {
        ImageRecord img;
        img.image_id = p.patient_id + "_" + cfg.modality_set[mi].tag() + "_" + std::to_string(r);
        img.patient_id = p.patient_id;
        img.modality = cfg.modality_set[mi];
        img.height = img.width = size;
        img.channels = kChannels;
        img.pixels.resize(static_cast<std::size_t>(size) * size * kChannels);
        for (std::size_t px = 0; px < shaped.size(); ++px) {
          const double base = apply_curve(style.curve, shaped[px]);
          for (int c = 0; c < kChannels; ++c) {
            const double val = std::clamp(base * style.mix[static_cast<std::size_t>(c)] + noise(rng), 0.0, 1.0);
            img.pixels[px * kChannels + static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(val * 255.0));
          }
        }
        p.images.push_back(std::move(img));
      }
    }
    m.records.push_back(std::move(p));
  }

  // Exactly round(text_fraction * n) patients per split receive a report.
  auto text_rng = stream(seed, 0x7E47);
  for (Split s : {Split::train, Split::val, Split::test}) {
    std::vector<PatientRecord*> members;
    for (auto& p : m.records)
      if (p.split == s) members.push_back(&p);
    std::shuffle(members.begin(), members.end(), text_rng);
    const auto n_text = static_cast<std::size_t>(std::lround(cfg.text_fraction * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < n_text; ++k) {
      auto* p = members[k];
      auto kw = text::extract_keywords(synthetic_classes()[static_cast<std::size_t>(*p->latent_class)].report,
                                       text::KeywordDictionary::builtin());
      if (!kw.empty()) p->keywords = std::move(kw);
    }
  }
  m.validate();
  return m;
}

void write_ppm(const std::filesystem::path& path, const ImageRecord& image) {
  if (image.channels != 1 && image.channels != 3)
    throw IoError("PPM/PGM output supports 1 or 3 channels, image " + image.image_id + " has " +
                  std::to_string(image.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void read_ppm(const std::filesystem::path& path, ImageRecord& image) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("missing image file for " + image.image_id + ": " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if (!in || (magic != "P6" && magic != "P5") || maxval != 255 || w <= 0 || h <= 0)
    throw IntegrityError("image " + image.image_id + ": not an 8-bit binary PPM/PGM");
  image.width = w;
  image.height = h;
  image.channels = magic == "P6" ? 3 : 1;
  image.pixels.resize(static_cast<std::size_t>(w) * h * image.channels);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.pixels.size()))
    throw IntegrityError("image " + image.image_id + ": truncated pixel data");
}

void persist_corpus(const CorpusManifest& manifest, const std::filesystem::path& dir) {
  manifest.validate();
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(dir / kManifestFileName);
  if (!out) throw IoError("cannot write manifest in " + dir.string());

  json header = {{"format_version", kManifestFormatVersion}};
  json mods = json::array();
  for (const auto& m : manifest.modality_set) mods.push_back(m.tag());
  header["modality_set"] = mods;
  header["generator_seed"] = manifest.generator_seed ? json(*manifest.generator_seed) : json(nullptr);
  header["class_names"] = manifest.class_names;
  out << header.dump() << '\n';

  for (const auto& p : manifest.records) {
    json rec = {{"patient_id", p.patient_id}, {"split", std::string(to_string(p.split))}};
    json images = json::array();
    for (const auto& img : p.images) {
      images.push_back({{"image_id", img.image_id}, {"modality", img.modality.tag()}, {"relative_path", img.relative_path()}});
      write_ppm(dir / img.relative_path(), img);
    }
    rec["images"] = images;
    if (p.keywords) rec["keywords"] = *p.keywords;
    if (p.latent_class) rec["latent_class"] = *p.latent_class;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("short write to manifest in " + dir.string());
}

CorpusManifest load_corpus(const std::filesystem::path& path) {
  const auto manifest_path = std::filesystem::is_directory(path) ? path / kManifestFileName : path;
  const auto root = manifest_path.parent_path();
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path.string());

  auto parse_line = [](const std::string& line, int line_no) {
    try {
      auto j = json::parse(line);
      if (!j.is_object()) throw ParseError("manifest line " + std::to_string(line_no) + ": expected an object");
      return j;
    } catch (const json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  };

  CorpusManifest m;
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw ParseError("manifest line 1: missing header");
  ++line_no;
  try {
    const auto header = parse_line(line, line_no);
    if (header.at("format_version").get<int>() != kManifestFormatVersion)
      throw ParseError("manifest line 1: unsupported format_version");
    for (const auto& t : header.at("modality_set")) m.modality_set.emplace_back(t.get<std::string>());
    if (header.contains("generator_seed") && !header["generator_seed"].is_null())
      m.generator_seed = header["generator_seed"].get<std::uint64_t>();
    if (header.contains("class_names")) m.class_names = header["class_names"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ParseError("manifest line 1: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw ParseError("manifest line 1: " + std::string(e.what()));
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto rec = parse_line(line, line_no);
    PatientRecord p;
    try {
      p.patient_id = rec.at("patient_id").get<std::string>();
      p.split = split_from_string(rec.at("split").get<std::string>());
      for (const auto& ji : rec.at("images")) {
        ImageRecord img;
        img.image_id = ji.at("image_id").get<std::string>();
        img.patient_id = p.patient_id;
        img.modality = Modality(ji.at("modality").get<std::string>());
        const auto rel = ji.at("relative_path").get<std::string>();
        read_ppm(root / rel, img);
        p.images.push_back(std::move(img));
      }
      if (rec.contains("keywords")) p.keywords = rec["keywords"].get<text::KeywordSet>();
      if (rec.contains("latent_class")) p.latent_class = rec["latent_class"].get<int>();
    } catch (const json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    m.records.push_back(std::move(p));
  }
  m.validate();
  return m;
}

}  // namespace mclab::corpus
