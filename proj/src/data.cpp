#include "slt/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "slt/errors.hpp"

namespace slt {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

template <class Int>
bool parse_int(std::string_view s, Int& out) {
  if (s.empty()) return false;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

// "HH:MM:SS,mmm"; a '.' separator is tolerated.
bool parse_time(std::string_view s, std::int64_t& ms) {
  if (s.size() < 12) return false;
  const auto colon1 = s.find(':');
  if (colon1 == std::string_view::npos) return false;
  const auto colon2 = s.find(':', colon1 + 1);
  if (colon2 == std::string_view::npos) return false;
  const auto comma = s.find_first_of(",.", colon2 + 1);
  if (comma == std::string_view::npos) return false;
  std::int64_t h = 0, m = 0, sec = 0, milli = 0;
  if (!parse_int(s.substr(0, colon1), h) ||
      !parse_int(s.substr(colon1 + 1, colon2 - colon1 - 1), m) ||
      !parse_int(s.substr(colon2 + 1, comma - colon2 - 1), sec) ||
      !parse_int(s.substr(comma + 1), milli)) {
    return false;
  }
  if (h < 0 || m < 0 || m > 59 || sec < 0 || sec > 59 || milli < 0 || milli > 999 ||
      comma + 4 != s.size()) {
    return false;
  }
  ms = ((h * 60 + m) * 60 + sec) * 1000 + milli;
  return true;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

bool is_peelable(std::string_view word, std::size_t at, std::size_t& len) {
  static constexpr std::string_view kAscii = ".,!?;:\"()-";
  if (kAscii.find(word[at]) != std::string_view::npos) {
    len = 1;
    return true;
  }
  // « and » (U+00AB, U+00BB)
  if (at + 1 < word.size() && static_cast<unsigned char>(word[at]) == 0xC2 &&
      (static_cast<unsigned char>(word[at + 1]) == 0xAB ||
       static_cast<unsigned char>(word[at + 1]) == 0xBB)) {
    len = 2;
    return true;
  }
  return false;
}

bool ends_with_peelable(std::string_view word, std::size_t& len) {
  if (word.empty()) return false;
  if (word.size() >= 2 && is_peelable(word, word.size() - 2, len) && len == 2) return true;
  return is_peelable(word, word.size() - 1, len) && len == 1;
}

}  // namespace

std::string format_srt_time(std::int64_t ms) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld,%03lld", (long long)(ms / 3600000),
                (long long)(ms / 60000 % 60), (long long)(ms / 1000 % 60), (long long)(ms % 1000));
  return buf;
}

std::vector<SubtitleEntry> parse_srt(std::string_view text) {
  if (text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
  const auto lines = split_lines(text);
  std::vector<SubtitleEntry> entries;
  std::size_t i = 0;
  while (i < lines.size()) {
    if (trim(lines[i]).empty()) {
      ++i;
      continue;
    }
    SubtitleEntry e;
    if (!parse_int(trim(lines[i]), e.index) || e.index <= 0) {
      throw ParseError("expected a positive cue index, got '" + std::string(lines[i]) + "'", i + 1);
    }
    ++i;
    if (i >= lines.size()) throw ParseError("missing timestamp line", i + 1);
    const std::string_view timing = trim(lines[i]);
    const auto arrow = timing.find("-->");
    if (arrow == std::string_view::npos || !parse_time(trim(timing.substr(0, arrow)), e.start_ms) ||
        !parse_time(trim(timing.substr(arrow + 3)), e.end_ms)) {
      throw ParseError("malformed timestamp line '" + std::string(lines[i]) + "'", i + 1);
    }
    if (e.end_ms <= e.start_ms) throw ParseError("cue ends before it starts", i + 1);
    const std::size_t timing_line = i + 1;
    ++i;
    while (i < lines.size() && !trim(lines[i]).empty()) {
      if (!e.text.empty()) e.text += ' ';
      e.text += trim(lines[i]);
      ++i;
    }
    if (e.text.empty()) throw ParseError("cue has no text", timing_line + 1);
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string serialize_srt(const std::vector<SubtitleEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    out += std::to_string(e.index) + "\n" + format_srt_time(e.start_ms) + " --> " +
           format_srt_time(e.end_ms) + "\n" + e.text + "\n\n";
  }
  return out;
}

std::vector<SubtitleEntry> read_srt(const fs::path& path) { return parse_srt(read_file(path)); }

std::string ffmpeg_command(const std::string& video, std::int64_t start_ms, std::int64_t end_ms,
                           const std::string& clip_path) {
  char times[64];
  std::snprintf(times, sizeof times, "-ss %.3f -to %.3f", double(start_ms) / 1000.0,
                double(end_ms) / 1000.0);
  return "ffmpeg -i " + video + " " + times + " -y " + clip_path;
}

ManifestPlan build_manifest(const std::vector<SubtitleEntry>& entries, const std::string& video_path,
                            std::int64_t video_duration_ms, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const fs::path probe = out_dir / ".slt_write_probe";
  {
    std::ofstream out(probe);
    if (ec || !out) throw IoError("output directory " + out_dir.string() + " is not writable");
  }
  fs::remove(probe, ec);

  ManifestPlan plan;
  const std::string stem = fs::path(video_path).stem().string();
  for (const auto& e : entries) {
    const std::int64_t start = std::max<std::int64_t>(0, e.start_ms);
    const std::int64_t end = std::min(e.end_ms, video_duration_ms);
    if (start >= end) {
      ++plan.dropped;
      continue;
    }
    char name[32];
    std::snprintf(name, sizeof name, "_%06zu.mp4", plan.records.size() + 1);
    ManifestRecord r{(out_dir / (stem + name)).string(), e.text, video_path, start, end};
    plan.commands.push_back(ffmpeg_command(video_path, start, end, r.clip_path));
    plan.records.push_back(std::move(r));
  }
  return plan;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  auto clean = [](std::string s) {
    std::replace_if(s.begin(), s.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; },
                    ' ');
    return s;
  };
  std::string out;
  for (const auto& r : records) {
    out += clean(r.clip_path) + '\t' + clean(r.sentence) + '\t' + clean(r.source_video) + '\t' +
           std::to_string(r.start_ms) + '\t' + std::to_string(r.end_ms) + '\n';
  }
  write_file(path, out);
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  std::vector<ManifestRecord> records;
  const auto lines = split_lines(text);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (trim(lines[n]).empty()) continue;
    std::vector<std::string_view> cols;
    std::string_view rest = lines[n];
    for (std::size_t tab; (tab = rest.find('\t')) != std::string_view::npos;) {
      cols.push_back(rest.substr(0, tab));
      rest.remove_prefix(tab + 1);
    }
    cols.push_back(rest);
    ManifestRecord r;
    if (cols.size() != 5 || !parse_int(cols[3], r.start_ms) || !parse_int(cols[4], r.end_ms)) {
      throw ParseError("manifest rows need clip_path, sentence, source_video, start_ms, end_ms",
                       n + 1);
    }
    r.clip_path = cols[0];
    r.sentence = cols[1];
    r.source_video = cols[2];
    records.push_back(std::move(r));
  }
  return records;
}

std::string encode_clip(const Tensor& clip) {
  if (clip.rank() != 4) throw DimensionError("clip must be [C,D,H,W], got " + shape_str(clip.shape()));
  std::string out = "SLTC";
  put_u32(out, kClipVersion);
  for (std::size_t d : clip.shape()) put_u32(out, std::uint32_t(d));
  out.reserve(kClipHeaderBytes + 4 * clip.size());
  for (float v : clip.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_clip(std::string_view bytes) {
  if (bytes.size() < kClipHeaderBytes || bytes.substr(0, 4) != "SLTC") {
    throw FormatError("not a clip file (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kClipVersion) {
    throw FormatError("unsupported clip version " + std::to_string(version));
  }
  Shape shape(4);
  for (std::size_t i = 0; i < 4; ++i) shape[i] = get_u32(bytes, 8 + 4 * i);
  const std::size_t n = numel(shape);
  if (n == 0) throw FormatError("clip has an empty extent");
  if (bytes.size() != kClipHeaderBytes + 4 * n) {
    throw FormatError("clip payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(kClipHeaderBytes + 4 * n));
  }
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = std::bit_cast<float>(get_u32(bytes, kClipHeaderBytes + 4 * i));
  }
  return Tensor(std::move(shape), std::move(values));
}

void write_clip(const fs::path& path, const Tensor& clip) { write_file(path, encode_clip(clip)); }

Tensor read_clip(const fs::path& path) { return decode_clip(read_file(path)); }

std::vector<std::size_t> temporal_indices(std::size_t source, std::size_t target) {
  if (source == 0 || target == 0) throw DimensionError("temporal resize needs non-empty clips");
  std::vector<std::size_t> idx(target);
  for (std::size_t i = 0; i < target; ++i) {
    if (source > target) {
      idx[i] = target == 1 ? 0
                           : std::size_t(std::llround(double(i) * double(source - 1) /
                                                      double(target - 1)));
    } else {
      idx[i] = i % source;
    }
  }
  return idx;
}

Tensor fit_clip(const Tensor& raw, const ClipShape& shape) {
  if (raw.rank() != 4 || (raw.dim(0) != 1 && raw.dim(0) != 3)) {
    throw DimensionError("clip must be [1 or 3, D, H, W], got " + shape_str(raw.shape()));
  }
  if (shape.depth == 0 || shape.height == 0 || shape.width == 0) {
    throw ConfigError("target clip extents must be positive");
  }
  const std::size_t sc = raw.dim(0), sd = raw.dim(1), sh = raw.dim(2), sw = raw.dim(3);
  const auto frames = temporal_indices(sd, shape.depth);
  const std::size_t H = shape.height, W = shape.width;

  // Bilinear taps with half-pixel centres; identity when sizes agree.
  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t src, std::size_t dst) {
    std::vector<Tap> t(dst);
    const double scale = double(src) / double(dst);
    for (std::size_t i = 0; i < dst; ++i) {
      double pos = std::clamp((double(i) + 0.5) * scale - 0.5, 0.0, double(src - 1));
      const auto lo = std::size_t(pos);
      t[i] = {lo, std::min(lo + 1, src - 1), pos - double(lo)};
    }
    return t;
  };
  const auto ty = taps(sh, H), tx = taps(sw, W);

  std::vector<float> out(3 * shape.depth * H * W);
  const float* src = raw.data().data();
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t cs = sc == 1 ? 0 : c;
    for (std::size_t d = 0; d < shape.depth; ++d) {
      const float* plane = src + (cs * sd + frames[d]) * sh * sw;
      float* dst = out.data() + (c * shape.depth + d) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        const Tap& a = ty[y];
        for (std::size_t x = 0; x < W; ++x) {
          const Tap& b = tx[x];
          const double top = plane[a.lo * sw + b.lo] * (1 - b.frac) + plane[a.lo * sw + b.hi] * b.frac;
          const double bot = plane[a.hi * sw + b.lo] * (1 - b.frac) + plane[a.hi * sw + b.hi] * b.frac;
          dst[y * W + x] = float(std::clamp(top * (1 - a.frac) + bot * a.frac, 0.0, 1.0));
        }
      }
    }
  }
  return Tensor({3, shape.depth, H, W}, std::move(out));
}

Tensor load_clip(const fs::path& path, const ClipShape& shape) {
  return fit_clip(read_clip(path), shape);
}

std::vector<std::string> tokenize_german(std::string_view sentence) {
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  const auto ws = " \t\r\n\f\v";
  while (true) {
    const auto b = sentence.find_first_not_of(ws, pos);
    if (b == std::string_view::npos) break;
    auto e = sentence.find_first_of(ws, b);
    if (e == std::string_view::npos) e = sentence.size();
    std::string_view word = sentence.substr(b, e - b);
    pos = e;

    std::size_t len = 0;
    while (!word.empty() && is_peelable(word, 0, len)) {
      tokens.emplace_back(word.substr(0, len));
      word.remove_prefix(len);
    }
    std::vector<std::string> trailing;
    while (ends_with_peelable(word, len)) {
      trailing.emplace_back(word.substr(word.size() - len));
      word.remove_suffix(len);
    }
    if (!word.empty()) tokens.emplace_back(word);
    tokens.insert(tokens.end(), trailing.rbegin(), trailing.rend());
  }
  return tokens;
}

FilterResult filter_long(const std::vector<ManifestRecord>& records, std::size_t max_tokens) {
  FilterResult result;
  for (const auto& r : records) {
    if (tokenize_german(r.sentence).size() > max_tokens) {
      ++result.dropped;
    } else {
      result.kept.push_back(r);
    }
  }
  return result;
}

Vocabulary build_vocab(const std::vector<std::string>& sentences, std::size_t min_freq) {
  std::vector<std::vector<std::string>> tokenized;
  tokenized.reserve(sentences.size());
  for (const auto& s : sentences) tokenized.push_back(tokenize_german(s));
  return Vocabulary::build(tokenized, min_freq);
}

SummaryStats summarize(const std::vector<double>& values) {
  SummaryStats s;
  s.count = values.size();
  if (values.empty()) return s;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / double(values.size());
  double sq = 0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / double(values.size()));
  return s;
}

CorpusStats corpus_stats(const std::vector<std::string>& sentences) {
  std::vector<double> lengths;
  std::set<std::string> types;
  for (const auto& s : sentences) {
    auto tokens = tokenize_german(s);
    lengths.push_back(double(tokens.size()));
    types.insert(std::make_move_iterator(tokens.begin()), std::make_move_iterator(tokens.end()));
  }
  const auto s = summarize(lengths);
  return {sentences.size(), types.size(), s.min, s.mean, s.max, s.std};
}

SummaryStats video_stats(const std::vector<double>& durations_s) { return summarize(durations_s); }

std::string format_stats(double min, double mean, double max, double std) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << min << '/' << mean << '/' << max << '/' << std;
  return out.str();
}

std::size_t Batch::token_count() const {
  std::size_t n = 0;
  for (const auto& row : target_mask)
    for (auto m : row) n += m;
  return n;
}

std::vector<Batch> batch_iter(const std::vector<std::vector<int>>& targets, std::size_t batch_size,
                              SplitMix64& rng) {
  if (targets.empty()) throw ContractError("cannot batch an empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(targets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    b.indices.assign(order.begin() + std::ptrdiff_t(start),
                     order.begin() + std::ptrdiff_t(std::min(order.size(), start + batch_size)));
    std::size_t width = 0;
    for (auto i : b.indices) width = std::max(width, targets[i].size());
    for (auto i : b.indices) {
      auto ids = targets[i];
      std::vector<std::uint8_t> mask(ids.size(), 1);
      ids.resize(width, kPadId);
      mask.resize(width, 0);
      b.target_ids.push_back(std::move(ids));
      b.target_mask.push_back(std::move(mask));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<Tensor> load_clips(const std::vector<std::string>& paths, const ClipShape& shape,
                               std::size_t workers) {
  std::vector<Tensor> clips(paths.size());
  workers = std::clamp<std::size_t>(workers, 1, 5);
  workers = std::min(workers, std::max<std::size_t>(paths.size(), 1));
  std::vector<std::exception_ptr> errors(workers);
  auto job = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < paths.size(); i += workers) clips[i] = load_clip(paths[i], shape);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    job(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(job, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return clips;
}

SynthCorpus synth_corpus(std::size_t n, std::size_t vocab_size, const ClipShape& shape,
                         SplitMix64& rng) {
  if (n == 0) throw ContractError("synthetic corpus needs at least one pair");
  if (vocab_size < 2) throw ConfigError("synthetic vocabulary needs at least two words");
  if (shape.depth < 2 || shape.height < 4 || shape.width < 4) {
    throw ConfigError("synthetic clips need depth >= 2 and frames of at least 4x4");
  }
  const std::size_t max_len = std::min<std::size_t>(5, shape.depth);
  const std::size_t min_len = std::min<std::size_t>(2, max_len);

  SynthCorpus corpus;
  std::set<std::vector<std::size_t>> seen;
  std::size_t attempts = 0;
  while (corpus.sentences.size() < n) {
    if (++attempts > 1000 * n) throw ConfigError("cannot draw enough distinct synthetic sentences");
    std::vector<std::size_t> words(min_len + rng.below(max_len - min_len + 1));
    for (auto& w : words) w = rng.below(vocab_size);
    if (!seen.insert(words).second) continue;

    std::string sentence;
    for (auto w : words) sentence += (sentence.empty() ? "w" : " w") + std::to_string(w);

    const std::size_t D = shape.depth, H = shape.height, W = shape.width;
    std::vector<float> voxels(3 * D * H * W);
    for (auto& v : voxels) v = float(0.05 * rng.uniform());
    for (std::size_t f = 0; f < D; ++f) {
      const std::size_t slot = f * words.size() / D;
      const std::size_t w = words[slot];
      const std::size_t t = f - (slot * D + words.size() - 1) / words.size();
      const std::size_t side = std::max<std::size_t>(2, (H * (2 + w % 3)) / 8);
      const std::size_t span_y = H > side ? H - side : 1, span_x = W > side ? W - side : 1;
      const std::size_t y0 = (w * 5 + t * (1 + w % 2)) % span_y;
      const std::size_t x0 = (w * 3 + t * (1 + (w / 2) % 3)) % span_x;
      const float colour[3] = {float((w % 3) == 0), float((w % 3) == 1), float(0.3 + 0.7 * ((w / 3) % 2))};
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = y0; y < std::min(H, y0 + side); ++y)
          for (std::size_t x = x0; x < std::min(W, x0 + side); ++x)
            voxels[((c * D + f) * H + y) * W + x] = 0.5f * colour[c] + 0.45f;
    }
    corpus.sentences.push_back(std::move(sentence));
    corpus.clips.emplace_back(Shape{3, D, H, W}, std::move(voxels));
  }
  return corpus;
}

std::vector<ManifestRecord> write_synth_corpus(const fs::path& dir, const SynthCorpus& corpus) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < corpus.clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04zu.sltc", i);
    const fs::path path = dir / name;
    write_clip(path, corpus.clips[i]);
    const auto frames = std::int64_t(corpus.clips[i].dim(1));
    records.push_back({path.string(), corpus.sentences[i], "synthetic", 0, frames * 40});
  }
  write_manifest(dir / "manifest.tsv", records);
  return records;
}

}  // namespace slt
