#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "slt/rng.hpp"
#include "slt/tensor.hpp"
#include "slt/vocab.hpp"

namespace slt {

struct SubtitleEntry {
  int index = 0;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
  std::string text;

  bool operator==(const SubtitleEntry&) const = default;
};

/// SubRip text (LF or CRLF, optional UTF-8 BOM). Cue text lines are joined
/// with single spaces. Throws ParseError carrying the offending line.
std::vector<SubtitleEntry> parse_srt(std::string_view text);
std::string serialize_srt(const std::vector<SubtitleEntry>& entries);
std::vector<SubtitleEntry> read_srt(const std::filesystem::path& path);

/// "HH:MM:SS,mmm"
std::string format_srt_time(std::int64_t ms);

struct ManifestRecord {
  std::string clip_path;
  std::string sentence;
  std::string source_video;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;

  bool operator==(const ManifestRecord&) const = default;
};

struct ManifestPlan {
  std::vector<ManifestRecord> records;
  std::vector<std::string> commands;
  /// Entries lying entirely outside the video.
  std::size_t dropped = 0;
};

/// One clip per subtitle entry, interval clamped to [0, duration]. Commands
/// are returned for the caller to run; nothing is executed here.
ManifestPlan build_manifest(const std::vector<SubtitleEntry>& entries,
                            const std::string& video_path, std::int64_t video_duration_ms,
                            const std::filesystem::path& out_dir);

std::string ffmpeg_command(const std::string& video, std::int64_t start_ms, std::int64_t end_ms,
                           const std::string& clip_path);

/// Tab-separated, no header: clip_path, sentence, source_video, start_ms, end_ms.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Clip interchange file: "SLTC", u32 version, u32 C,D,H,W, then f32 values,
/// all little-endian.
inline constexpr std::uint32_t kClipVersion = 1;
inline constexpr std::size_t kClipHeaderBytes = 24;

std::string encode_clip(const Tensor& clip);
Tensor decode_clip(std::string_view bytes);
void write_clip(const std::filesystem::path& path, const Tensor& clip);
/// Raw file contents as [C,D,H,W].
Tensor read_clip(const std::filesystem::path& path);

struct ClipShape {
  std::size_t depth = 100;
  std::size_t height = 224;
  std::size_t width = 224;
};

/// Source frame for each of `target` output frames: uniform sampling when
/// shrinking, cyclic repetition when growing.
std::vector<std::size_t> temporal_indices(std::size_t source, std::size_t target);

/// [C,D,H,W] -> [3,depth,height,width]. One channel is replicated to three;
/// bilinear spatial resize; values clamped to [0,1].
Tensor fit_clip(const Tensor& raw, const ClipShape& shape);
Tensor load_clip(const std::filesystem::path& path, const ClipShape& shape);

/// Whitespace split, then leading and trailing .,!?;:"()«»- peeled off as
/// one token per character.
std::vector<std::string> tokenize_german(std::string_view sentence);

struct FilterResult {
  std::vector<ManifestRecord> kept;
  std::size_t dropped = 0;
};
FilterResult filter_long(const std::vector<ManifestRecord>& records, std::size_t max_tokens = 50);

Vocabulary build_vocab(const std::vector<std::string>& sentences, std::size_t min_freq = 1);

struct SummaryStats {
  std::size_t count = 0;
  double min = 0, mean = 0, max = 0, std = 0;
};

/// Population statistics; all zero for an empty input.
SummaryStats summarize(const std::vector<double>& values);

struct CorpusStats {
  std::size_t sentence_count = 0;
  std::size_t vocab_size = 0;
  double min = 0, mean = 0, max = 0, std = 0;
};

CorpusStats corpus_stats(const std::vector<std::string>& sentences);
SummaryStats video_stats(const std::vector<double>& durations_s);

/// "min/mean/max/std" with two decimals.
std::string format_stats(double min, double mean, double max, double std);

/// One training example with its target ids (EOS-terminated).
struct Sample {
  Tensor clip;
  std::vector<int> target;
};

struct Batch {
  std::vector<std::size_t> indices;
  /// [batch][max_len], PAD-filled.
  std::vector<std::vector<int>> target_ids;
  /// 1 on real tokens, 0 on padding.
  std::vector<std::vector<std::uint8_t>> target_mask;

  std::size_t size() const { return indices.size(); }
  std::size_t token_count() const;
};

/// One epoch of batches over `targets`, order shuffled with `rng`; the last
/// batch may be short.
std::vector<Batch> batch_iter(const std::vector<std::vector<int>>& targets, std::size_t batch_size,
                              SplitMix64& rng);

/// Loads clips with up to `workers` threads (capped at 5), in input order.
std::vector<Tensor> load_clips(const std::vector<std::string>& paths, const ClipShape& shape,
                               std::size_t workers = 1);

struct SynthCorpus {
  std::vector<std::string> sentences;
  std::vector<Tensor> clips;
};

/// Pairs whose sentence is drawn as moving blocks in the clip: every token
/// owns a run of frames in which a block of its own colour, size and
/// velocity crosses the frame. Sentences are pairwise distinct.
SynthCorpus synth_corpus(std::size_t n, std::size_t vocab_size, const ClipShape& shape,
                         SplitMix64& rng);

/// Writes clips as <dir>/clip_NNNN.sltc and a manifest <dir>/manifest.tsv.
std::vector<ManifestRecord> write_synth_corpus(const std::filesystem::path& dir,
                                               const SynthCorpus& corpus);

}  // namespace slt
