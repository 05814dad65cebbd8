#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slt/rng.hpp"

namespace slt {

enum class Metric { bleu, chrf };

/// Parses "bleu" / "chrf" (also "chrf2++"); throws ConfigError otherwise.
Metric parse_metric(std::string_view name);
std::string metric_name(Metric m);

/// Scores are on the 0-100 scale. Without resampling the interval collapses
/// onto the value and n_resamples is 0.
struct MetricScore {
  double value = 0;
  double ci_low = 0;
  double ci_high = 0;
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;

  double half_width() const { return 0.5 * (ci_high - ci_low); }
};

/// Per-order clipped matches and hypothesis totals. For BLEU orders 1-4 and
/// the two lengths; for chrF char orders 1-6 then word orders 1-2, with the
/// reference totals alongside.
struct NgramCounts {
  std::vector<std::size_t> matches;
  std::vector<std::size_t> hyp_totals;
  std::vector<std::size_t> ref_totals;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  NgramCounts& operator+=(const NgramCounts& o);
};

/// mteval-v13a tokenization.
std::vector<std::string> tokenize_13a(std::string_view text);

NgramCounts bleu_counts(std::string_view hypothesis, std::string_view reference);
NgramCounts chrf_counts(std::string_view hypothesis, std::string_view reference);
NgramCounts segment_counts(Metric m, std::string_view hypothesis, std::string_view reference);

/// Corpus score from summed counts.
double score_from_counts(Metric m, const NgramCounts& counts);

/// Corpus BLEU-4, 13a tokens, exponential smoothing. Throws ContractError on
/// a length mismatch.
MetricScore bleu(std::span<const std::string> hypotheses, std::span<const std::string> references);
/// chrF with character order 6, word order 2 and beta 2.
MetricScore chrf2pp(std::span<const std::string> hypotheses,
                    std::span<const std::string> references);
MetricScore corpus_score(Metric m, std::span<const std::string> hypotheses,
                         std::span<const std::string> references);

inline constexpr std::size_t kBootstrapResamples = 1000;
inline constexpr std::uint64_t kBootstrapSeed = 12345;

/// Sentence-level resampling with replacement; resample i draws from a
/// SplitMix64 seeded with output i of SplitMix64(seed). The interval is the
/// 2.5/97.5 percentile pair, linearly interpolated.
MetricScore bootstrap_ci(std::span<const std::string> hypotheses,
                         std::span<const std::string> references, Metric m,
                         std::size_t n = kBootstrapResamples, std::uint64_t seed = kBootstrapSeed);

/// Linear-interpolation percentile of unsorted values, q in [0,1].
double percentile(std::vector<double> values, double q);

/// "BLEU|nrefs:1|bs:1000|seed:12345|case:mixed|eff:no|tok:13a|smooth:exp" style.
std::string metric_signature(Metric m, const MetricScore& s);
/// "12.34±0.56" with two decimals.
std::string format_score(const MetricScore& s);
/// {metric, value, ci_low, ci_high, n, seed, signature, display}.
std::string metric_report_json(Metric m, const MetricScore& s);

struct UnigramTable {
  std::vector<std::string> tokens;
  std::vector<std::size_t> counts;
};

/// Token frequencies over tokenized training sentences, specials dropped.
/// Tokens are ordered by decreasing count, then bytewise.
UnigramTable unigram_table(const std::vector<std::vector<std::string>>& sentences);

inline constexpr std::size_t kMaxWalkLength = 50;

/// Each sentence takes a length drawn from `lengths` (capped at 50) and that
/// many tokens drawn i.i.d., by frequency or uniformly. Tokens are joined by
/// single spaces.
std::vector<std::string> random_walk_baseline(const UnigramTable& table, std::size_t n_sentences,
                                              std::span<const std::size_t> lengths,
                                              SplitMix64& rng, bool uniform = false);

}  // namespace slt
