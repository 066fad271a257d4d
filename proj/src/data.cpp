// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "data.hpp"

#include "errors.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>

namespace discovr::data {

namespace {

constexpr char kVideoMagic[8] = {'D', 'S', 'C', 'V', 'V', 'I', 'D', '1'};
constexpr std::uint32_t kVideoVersion = 1;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

std::string format_ef(double ef) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << ef;
  std::string s = os.str();
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

std::mutex& decoder_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, VideoDecoder>& decoders() {
  static std::map<std::string, VideoDecoder> table{{".dvid", [](const std::filesystem::path& p) { return read_video(p); }}};
  return table;
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Uniform draw from [lo, hi] shrunk about its midpoint by `spread`.
double jitter(Rng& rng, double lo, double hi, double spread) {
  const double mid = 0.5 * (lo + hi);
  return mid + spread * (uniform(rng, lo, hi) - mid);
}

double smoothstep_edge(double signed_px) {
  // ~1 px logistic edge; positive inside.
  return 1.0 / (1.0 + std::exp(-2.0 * signed_px));
}

}  // namespace

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::string_view to_string(Label l) {
  switch (l) {
    case Label::normal: return "normal";
    case Label::abnormal: return "abnormal";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("invalid split '" + std::string(s) + "' (expected train|val|test)");
}

Label parse_label(std::string_view s) {
  if (s == "normal") return Label::normal;
  if (s == "abnormal") return Label::abnormal;
  if (s == "unlabeled" || s.empty()) return Label::unlabeled;
  throw DataError("invalid label '" + std::string(s) + "' (expected normal|abnormal|unlabeled)");
}

Label label_from_ef(double ef) {
  if (!(ef >= 0.0 && ef <= 100.0)) throw DataError("ejection fraction out of range [0, 100]: " + std::to_string(ef));
  return (ef < 45.0 || ef > 75.0) ? Label::abnormal : Label::normal;
}

std::filesystem::path Manifest::resolve(const ManifestRecord& r) const {
  std::filesystem::path p(r.video_path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<ManifestRecord> Manifest::split(Split s) const {
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(r);
  }
  return out;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest is empty (missing header): " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw DataError("manifest header must be '" + std::string(kManifestHeader) + "', got '" + line + "'");
  }
  std::set<std::string> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 6) {
      throw DataError(where + ": expected 6 columns, found " + std::to_string(fields.size()));
    }
    ManifestRecord r;
    r.video_path = fields[0];
    if (r.video_path.empty()) throw DataError(where + ": empty video_path");
    try {
      r.split = parse_split(fields[1]);
      r.label = parse_label(fields[2]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!fields[3].empty()) {
      double ef = 0.0;
      const auto* first = fields[3].data();
      const auto* last = first + fields[3].size();
      auto [ptr, ec] = std::from_chars(first, last, ef);
      if (ec != std::errc() || ptr != last) throw DataError(where + ": invalid ef '" + fields[3] + "'");
      const Label implied = label_from_ef(ef);
      if (r.label != Label::unlabeled && r.label != implied) {
        throw DataError(where + ": label '" + std::string(to_string(r.label)) + "' contradicts ef=" + fields[3] +
                        " (implies " + std::string(to_string(implied)) + ")");
      }
      r.ef = ef;
    }
    r.view = fields[4];
    r.patient_id = fields[5];
    if (!seen.insert(r.video_path).second) throw DataError(where + ": duplicate video_path '" + r.video_path + "'");
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& r : records) {
    out << r.video_path << ',' << to_string(r.split) << ',' << to_string(r.label) << ','
        << (r.ef ? format_ef(*r.ef) : std::string()) << ',' << r.view << ',' << r.patient_id << '\n';
  }
  if (!out) throw IoError("failed writing manifest: " + path.string());
}

std::vector<ManifestRecord> pretraining_records(const std::vector<ManifestRecord>& records) {
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    if (r.split == Split::train && r.label == Label::normal) out.push_back(r);
  }
  return out;
}

void write_video(const std::filesystem::path& path, const Video& video, DType dtype) {
  if (video.data.size() != static_cast<std::size_t>(video.frames) * video.frame_size()) {
    throw ShapeError("write_video: buffer does not match geometry");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write video: " + path.string());
  out.write(kVideoMagic, sizeof kVideoMagic);
  const std::uint32_t header[5] = {kVideoVersion, static_cast<std::uint32_t>(video.frames),
                                   static_cast<std::uint32_t>(video.height), static_cast<std::uint32_t>(video.width),
                                   static_cast<std::uint32_t>(video.channels)};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  const std::uint8_t code[4] = {static_cast<std::uint8_t>(dtype), 0, 0, 0};
  out.write(reinterpret_cast<const char*>(code), sizeof code);
  if (dtype == DType::u8) {
    std::vector<std::uint8_t> bytes(video.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(video.data[i], 0.0f, 1.0f) * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  } else {
    out.write(reinterpret_cast<const char*>(video.data.data()),
              static_cast<std::streamsize>(video.data.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing video: " + path.string());
}

Video read_video(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open video: " + path.string());
  char magic[8];
  std::uint32_t header[5];
  std::uint8_t code[4];
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(header), sizeof header);
  in.read(reinterpret_cast<char*>(code), sizeof code);
  if (!in || std::memcmp(magic, kVideoMagic, sizeof magic) != 0) throw CorruptionError("not a video container: " + path.string());
  if (header[0] != kVideoVersion) throw VersionError("unsupported video container version in " + path.string());
  Video v;
  v.frames = static_cast<int>(header[1]);
  v.height = static_cast<int>(header[2]);
  v.width = static_cast<int>(header[3]);
  v.channels = static_cast<int>(header[4]);
  if (v.frames <= 0 || v.height <= 0 || v.width <= 0 || v.channels <= 0) {
    throw DataError("empty video: " + path.string());
  }
  const std::size_t n = static_cast<std::size_t>(v.frames) * v.frame_size();
  v.data.resize(n);
  if (code[0] == static_cast<std::uint8_t>(DType::u8)) {
    std::vector<std::uint8_t> bytes(n);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (!in) throw CorruptionError("truncated video payload: " + path.string());
    for (std::size_t i = 0; i < n; ++i) v.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  } else if (code[0] == static_cast<std::uint8_t>(DType::f32)) {
    in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw CorruptionError("truncated video payload: " + path.string());
    for (int c = 0; c < v.channels; ++c) {
      float lo = std::numeric_limits<float>::infinity();
      float hi = -lo;
      for (std::size_t i = static_cast<std::size_t>(c); i < n; i += static_cast<std::size_t>(v.channels)) {
        lo = std::min(lo, v.data[i]);
        hi = std::max(hi, v.data[i]);
      }
      const float range = hi - lo;
      for (std::size_t i = static_cast<std::size_t>(c); i < n; i += static_cast<std::size_t>(v.channels)) {
        v.data[i] = range > 0.0f ? (v.data[i] - lo) / range : 0.0f;
      }
    }
  } else {
    throw CorruptionError("unknown video dtype in " + path.string());
  }
  return v;
}

void register_decoder(const std::string& extension, VideoDecoder decoder) {
  std::lock_guard lock(decoder_mutex());
  decoders()[extension] = std::move(decoder);
}

Video load_video(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  VideoDecoder decoder;
  {
    std::lock_guard lock(decoder_mutex());
    auto it = decoders().find(ext);
    if (it == decoders().end()) throw DataError("no decoder registered for '" + ext + "' (" + path.string() + ")");
    decoder = it->second;
  }
  return decoder(path);
}

Video conform(const Video& video, int size, int channels) {
  if (video.channels != channels && video.channels != 1) {
    throw GeometryError("cannot map " + std::to_string(video.channels) + " channels to " + std::to_string(channels));
  }
  if (video.height == size && video.width == size && video.channels == channels) return video;
  Video out;
  out.frames = video.frames;
  out.height = size;
  out.width = size;
  out.channels = channels;
  out.data.resize(static_cast<std::size_t>(out.frames) * out.frame_size());
  const double sy = static_cast<double>(video.height) / size;
  const double sx = static_cast<double>(video.width) / size;
  for (int t = 0; t < video.frames; ++t) {
    const float* src = video.data.data() + static_cast<std::size_t>(t) * video.frame_size();
    float* dst = out.data.data() + static_cast<std::size_t>(t) * out.frame_size();
    for (int y = 0; y < size; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(video.height - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, video.height - 1);
      const double wy = fy - y0;
      for (int x = 0; x < size; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(video.width - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, video.width - 1);
        const double wx = fx - x0;
        for (int c = 0; c < channels; ++c) {
          const int sc = video.channels == 1 ? 0 : c;
          auto px = [&](int yy, int xx) {
            return static_cast<double>(src[(static_cast<std::size_t>(yy) * video.width + xx) * video.channels + sc]);
          };
          const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                           wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
          dst[(static_cast<std::size_t>(y) * size + x) * channels + c] = static_cast<float>(v);
        }
      }
    }
  }
  return out;
}

int clip_span(int frames, int stride) { return (frames - 1) * stride + 1; }

int valid_starts(int video_frames, int frames, int stride) {
  return std::max(1, video_frames - clip_span(frames, stride) + 1);
}

tokenizer::VideoClip extract_clip(const Video& video, int start, int frames, int stride, std::string source_id) {
  if (video.frames <= 0) throw DataError("cannot sample a clip from an empty video");
  tokenizer::VideoClip clip(frames, video.height, video.width, video.channels);
  clip.source_id = std::move(source_id);
  clip.span = {start, stride};
  const std::size_t fs = video.frame_size();
  for (int j = 0; j < frames; ++j) {
    const int src = (start + j * stride) % video.frames;
    std::copy_n(video.data.begin() + static_cast<std::ptrdiff_t>(fs * static_cast<std::size_t>(src)), fs,
                clip.data.begin() + static_cast<std::ptrdiff_t>(fs * static_cast<std::size_t>(j)));
  }
  return clip;
}

tokenizer::VideoClip sample_clip(const Video& video, int frames, int stride, Rng& rng, std::string source_id) {
  if (video.frames <= 0) throw DataError("cannot sample a clip from an empty video");
  const int starts = valid_starts(video.frames, frames, stride);
  const int start = std::uniform_int_distribution<int>(0, starts - 1)(rng);
  return extract_clip(video, start, frames, stride, std::move(source_id));
}

std::vector<tokenizer::VideoClip> tile_clips(const Video& video, int frames, int stride, std::string source_id) {
  if (video.frames <= 0) throw DataError("cannot tile an empty video");
  const int span = clip_span(frames, stride);
  const int count = std::max(1, video.frames / span);
  std::vector<tokenizer::VideoClip> out;
  for (int i = 0; i < count; ++i) out.push_back(extract_clip(video, i * span, frames, stride, source_id));
  return out;
}

void SyntheticConfig::validate() const {
  if (n_per_class <= 0) throw ConfigError("n_per_class must be positive");
  if (n_train_per_class < 0) throw ConfigError("n_train_per_class must be >= 0");
  if (frames <= 0 || height <= 0 || width <= 0 || channels <= 0) throw ConfigError("synthetic geometry must be positive");
  if (normal_amplitude_min < 0 || normal_amplitude_max < normal_amplitude_min || normal_amplitude_max >= 1.0 ||
      abnormal_amplitude_min < 0 || abnormal_amplitude_max < abnormal_amplitude_min || abnormal_amplitude_max >= 1.0) {
    throw ConfigError("synthetic amplitude ranges must satisfy 0 <= min <= max < 1");
  }
  if (!(period_min > 0) || period_max < period_min) throw ConfigError("synthetic period range is invalid");
  if (!(nuisance >= 0.0 && nuisance <= 1.0)) throw ConfigError("nuisance must lie in [0, 1]");
  if (wall_thickness <= 0 || speckle < 0 || frame_noise < 0) throw ConfigError("synthetic texture parameters are invalid");
}

std::filesystem::path mask_path_for(const std::filesystem::path& video_path) {
  return video_path.parent_path().parent_path() / "masks" / video_path.filename();
}

SyntheticDataset synth_generate(const SyntheticConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "videos", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  Rng rng(cfg.seed);
  SyntheticDataset ds;
  const int dim = std::min(cfg.height, cfg.width);
  int serial = 0;
  for (Split split : {Split::train, Split::val, Split::test}) {
    const int n = split == Split::train && cfg.n_train_per_class > 0 ? cfg.n_train_per_class : cfg.n_per_class;
    for (int i = 0; i < n; ++i) {
      for (Label label : {Label::normal, Label::abnormal}) {
        const bool abnormal = label == Label::abnormal;
        const double amp = abnormal ? uniform(rng, cfg.abnormal_amplitude_min, cfg.abnormal_amplitude_max)
                                    : uniform(rng, cfg.normal_amplitude_min, cfg.normal_amplitude_max);
        // Time-averaged chamber size is drawn independently of the class.
        const double mean_axis = jitter(rng, 0.17, 0.24, cfg.nuisance) * dim;
        const double a0 = mean_axis / (1.0 - amp / 2.0);
        const double aspect = jitter(rng, 1.15, 1.45, cfg.nuisance);
        const double cx = jitter(rng, 0.38, 0.62, cfg.nuisance) * cfg.width;
        const double cy = jitter(rng, 0.38, 0.62, cfg.nuisance) * cfg.height;
        const double angle = jitter(rng, -0.5, 0.5, cfg.nuisance);
        const double period = uniform(rng, cfg.period_min, cfg.period_max);
        const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double gain = jitter(rng, 0.85, 1.15, cfg.nuisance);
        const double wall = cfg.wall_thickness + (abnormal ? cfg.wall_delta : 0.0);

        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> texture(static_cast<std::size_t>(cfg.height) * cfg.width);
        for (auto& v : texture) v = std::max(0.0, 1.0 + cfg.speckle * normal(rng));

        Video video{cfg.frames, cfg.height, cfg.width, cfg.channels, {}};
        Video mask{cfg.frames, cfg.height, cfg.width, 1, {}};
        video.data.resize(static_cast<std::size_t>(cfg.frames) * video.frame_size());
        mask.data.resize(static_cast<std::size_t>(cfg.frames) * mask.frame_size());
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);
        for (int t = 0; t < cfg.frames; ++t) {
          const double r = 1.0 - amp * (1.0 - std::cos(2.0 * std::numbers::pi * t / period + phase)) / 2.0;
          const double ax = a0 * r;
          const double ay = a0 * aspect * r;
          for (int y = 0; y < cfg.height; ++y) {
            for (int x = 0; x < cfg.width; ++x) {
              const double dx = x + 0.5 - cx;
              const double dy = y + 0.5 - cy;
              const double u = (ca * dx + sa * dy) / ax;
              const double w = (-sa * dx + ca * dy) / ay;
              const double rho = std::sqrt(u * u + w * w);
              // Distances in pixels along the minor axis.
              const double inner = smoothstep_edge((1.0 - rho) * ax);
              const double outer = smoothstep_edge((1.0 + wall - rho) * ax);
              const double tissue = 0.30;
              const double wall_level = 0.85;
              const double blood = 0.06;
              double v = blood * inner + wall_level * (outer - inner) + tissue * (1.0 - outer);
              v *= gain * texture[static_cast<std::size_t>(y) * cfg.width + x];
              v += cfg.frame_noise * normal(rng);
              const float fv = static_cast<float>(std::clamp(v, 0.0, 1.0));
              const std::size_t base = (static_cast<std::size_t>(t) * cfg.height + y) * cfg.width + x;
              for (int c = 0; c < cfg.channels; ++c) video.data[base * cfg.channels + c] = fv;
              mask.data[base] = rho < 1.0 ? 1.0f : 0.0f;
            }
          }
        }

        char id[64];
        std::snprintf(id, sizeof id, "%s_%s_%04d", std::string(to_string(split)).c_str(),
                      std::string(to_string(label)).c_str(), i);
        const std::string rel = std::string("videos/") + id + ".dvid";
        write_video(out_dir / rel, video);
        write_video(out_dir / "masks" / (std::string(id) + ".dvid"), mask);

        ManifestRecord rec;
        rec.video_path = rel;
        rec.split = split;
        // EF from the contracted/relaxed chamber area ratio.
        rec.ef = std::round(1000.0 * 100.0 * (1.0 - (1.0 - amp) * (1.0 - amp))) / 1000.0;
        rec.label = label_from_ef(*rec.ef);
        if (rec.label != label) {
          throw ConfigError("synthetic amplitude ranges produce EF inconsistent with the class labels");
        }
        rec.view = "A4C";
        rec.patient_id = "synth" + std::to_string(serial++);
        ds.records.push_back(std::move(rec));
      }
    }
  }
  ds.manifest = out_dir / "manifest.csv";
  ds.train_manifest = out_dir / "manifest_train.csv";
  ds.val_manifest = out_dir / "manifest_val.csv";
  ds.test_manifest = out_dir / "manifest_test.csv";
  write_manifest(ds.manifest, ds.records);
  for (auto [split, path] : {std::pair{Split::train, ds.train_manifest}, std::pair{Split::val, ds.val_manifest},
                             std::pair{Split::test, ds.test_manifest}}) {
    std::vector<ManifestRecord> part;
    for (const auto& r : ds.records) {
      if (r.split == split) part.push_back(r);
    }
    write_manifest(path, part);
  }
  return ds;
}

double motion_energy(const Video& video, int lag) {
  if (lag <= 0 || lag >= video.frames) throw ConfigError("motion_energy: lag out of range");
  const std::size_t fs = video.frame_size();
  double total = 0.0;
  for (int t = 0; t + lag < video.frames; ++t) {
    const float* a = video.data.data() + fs * static_cast<std::size_t>(t);
    const float* b = video.data.data() + fs * static_cast<std::size_t>(t + lag);
    for (std::size_t i = 0; i < fs; ++i) total += std::abs(static_cast<double>(b[i]) - a[i]);
  }
  return total / (static_cast<double>(fs) * (video.frames - lag));
}

double chamber_contraction(const Video& video) {
  if (video.data.empty()) throw DataError("chamber_contraction: empty video");
  std::vector<float> sorted(video.data);
  const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
  std::nth_element(sorted.begin(), mid, sorted.end());
  const double threshold = 0.5 * *mid;
  const std::size_t fs = video.frame_size();
  double most = 0.0, least = static_cast<double>(fs);
  for (int t = 0; t < video.frames; ++t) {
    const float* f = video.data.data() + fs * static_cast<std::size_t>(t);
    const auto dark = static_cast<double>(std::count_if(f, f + fs, [&](float x) { return x < threshold; }));
    most = std::max(most, dark);
    least = std::min(least, dark);
  }
  return most > 0.0 ? (most - least) / most : 0.0;
}

}  // namespace discovr::data
