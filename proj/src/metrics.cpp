#include "slt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "slt/errors.hpp"

namespace slt {

namespace {

constexpr std::size_t kBleuOrder = 4;
constexpr std::size_t kCharOrder = 6;
constexpr std::size_t kWordOrder = 2;
constexpr double kBeta = 2.0;

std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = b;
    if (b >= 0xF0 && b < 0xF8) {
      len = 4;
      cp = b & 0x07;
    } else if (b >= 0xE0) {
      len = 3;
      cp = b & 0x0F;
    } else if (b >= 0xC0) {
      len = 2;
      cp = b & 0x1F;
    }
    bool ok = len == 1 || i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto c = static_cast<unsigned char>(s[i + k]);
      ok = (c & 0xC0) == 0x80;
      cp = (cp << 6) | (c & 0x3F);
    }
    if (!ok) {
      len = 1;
      cp = b;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string encode_utf8(std::u32string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t c : s) {
    if (c < 0x80) {
      out.push_back(char(c));
    } else if (c < 0x800) {
      out.push_back(char(0xC0 | (c >> 6)));
      out.push_back(char(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
      out.push_back(char(0xE0 | (c >> 12)));
      out.push_back(char(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(char(0x80 | (c & 0x3F)));
    } else {
      out.push_back(char(0xF0 | (c >> 18)));
      out.push_back(char(0x80 | ((c >> 12) & 0x3F)));
      out.push_back(char(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(char(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

// Python's str.isspace set, which str.split() uses.
bool is_space(char32_t c) {
  if ((c >= 0x09 && c <= 0x0D) || (c >= 0x1C && c <= 0x20)) return true;
  switch (c) {
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200A;
  }
}

std::vector<std::u32string> split_ws(std::u32string_view s) {
  std::vector<std::u32string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    const std::size_t start = i;
    while (i < s.size() && !is_space(s[i])) ++i;
    if (i > start) out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

bool is_digit(char32_t c) { return c >= U'0' && c <= U'9'; }

bool splits_13a(char32_t c) {
  return (c >= U'{' && c <= U'~') || (c >= U'[' && c <= U'`') || (c >= U' ' && c <= U'&') ||
         (c >= U'(' && c <= U'+') || (c >= U':' && c <= U'@') || c == U'/';
}

bool is_ascii_punct(char32_t c) {
  return c < 0x80 && std::u32string_view(U"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~").find(c) !=
                         std::u32string_view::npos;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

template <class Key>
using Counter = std::unordered_map<Key, std::size_t>;

template <class Key>
void clip_counts(const Counter<Key>& hyp, const Counter<Key>& ref, std::size_t& match,
                 std::size_t& hyp_total, std::size_t& ref_total) {
  match = hyp_total = ref_total = 0;
  for (const auto& [k, c] : hyp) {
    hyp_total += c;
    if (auto it = ref.find(k); it != ref.end()) match += std::min(c, it->second);
  }
  for (const auto& kv : ref) ref_total += kv.second;
}

std::vector<Counter<std::string>> word_ngrams(const std::vector<std::string>& toks,
                                              std::size_t max_order) {
  std::vector<Counter<std::string>> out(max_order);
  for (std::size_t n = 1; n <= max_order; ++n) {
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key = toks[i];
      for (std::size_t k = 1; k < n; ++k) key += ' ' + toks[i + k];
      ++out[n - 1][key];
    }
  }
  return out;
}

std::vector<Counter<std::u32string>> chrf_ngrams(std::u32string_view text) {
  std::u32string chars;
  for (char32_t c : text)
    if (!is_space(c)) chars.push_back(c);

  std::vector<std::u32string> words;
  for (auto& w : split_ws(text)) {
    if (w.size() == 1) {
      words.push_back(std::move(w));
    } else if (is_ascii_punct(w.back())) {
      words.push_back(w.substr(0, w.size() - 1));
      words.push_back(w.substr(w.size() - 1));
    } else if (is_ascii_punct(w.front())) {
      words.push_back(w.substr(0, 1));
      words.push_back(w.substr(1));
    } else {
      words.push_back(std::move(w));
    }
  }

  std::vector<Counter<std::u32string>> out(kCharOrder + kWordOrder);
  for (std::size_t n = 1; n <= kCharOrder; ++n)
    for (std::size_t i = 0; i + n <= chars.size(); ++i) ++out[n - 1][chars.substr(i, n)];
  for (std::size_t n = 1; n <= kWordOrder; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::u32string key = words[i];
      for (std::size_t k = 1; k < n; ++k) key += U' ' + words[i + k];
      ++out[kCharOrder + n - 1][key];
    }
  }
  return out;
}

double my_log(double x) { return x == 0.0 ? -9999999999.0 : std::log(x); }

double bleu_from_counts(const NgramCounts& c) {
  const double sys_len = double(c.hyp_len), ref_len = double(c.ref_len);
  double bp = 1.0;
  if (sys_len < ref_len) bp = sys_len > 0 ? std::exp(1.0 - ref_len / sys_len) : 0.0;

  if (std::all_of(c.matches.begin(), c.matches.end(), [](std::size_t m) { return m == 0; }))
    return 0.0;

  std::vector<double> precisions(kBleuOrder, 0.0);
  double smooth = 1.0;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    if (c.hyp_totals[n] == 0) break;
    if (c.matches[n] == 0) {
      smooth *= 2;
      precisions[n] = 100.0 / (smooth * double(c.hyp_totals[n]));
    } else {
      precisions[n] = 100.0 * double(c.matches[n]) / double(c.hyp_totals[n]);
    }
  }
  double log_sum = 0;
  for (double p : precisions) log_sum += my_log(p);
  return bp * std::exp(log_sum / double(kBleuOrder));
}

double chrf_from_counts(const NgramCounts& c) {
  const double factor = kBeta * kBeta;
  double avg_prec = 0, avg_rec = 0;
  std::size_t effective = 0;
  for (std::size_t i = 0; i < c.matches.size(); ++i) {
    const auto hyp = c.hyp_totals[i], ref = c.ref_totals[i], match = c.matches[i];
    if (hyp > 0 && ref > 0) {
      avg_prec += double(match) / double(hyp);
      avg_rec += double(match) / double(ref);
      ++effective;
    }
  }
  if (effective == 0) return 0.0;
  avg_prec /= double(effective);
  avg_rec /= double(effective);
  if (avg_prec + avg_rec == 0) return 0.0;
  return 100.0 * (1 + factor) * avg_prec * avg_rec / (factor * avg_prec + avg_rec);
}

void check_parallel(std::span<const std::string> h, std::span<const std::string> r) {
  if (h.size() != r.size()) {
    throw ContractError("hypothesis count " + std::to_string(h.size()) +
                        " differs from reference count " + std::to_string(r.size()));
  }
}

std::vector<NgramCounts> all_counts(Metric m, std::span<const std::string> h,
                                    std::span<const std::string> r) {
  check_parallel(h, r);
  std::vector<NgramCounts> out;
  out.reserve(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out.push_back(segment_counts(m, h[i], r[i]));
  return out;
}

NgramCounts empty_counts(Metric m) {
  NgramCounts c;
  const std::size_t n = m == Metric::bleu ? kBleuOrder : kCharOrder + kWordOrder;
  c.matches.assign(n, 0);
  c.hyp_totals.assign(n, 0);
  c.ref_totals.assign(n, 0);
  return c;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

Metric parse_metric(std::string_view name) {
  if (name == "bleu" || name == "BLEU") return Metric::bleu;
  if (name == "chrf" || name == "chrF" || name == "chrf2++" || name == "chrF2++") return Metric::chrf;
  throw ConfigError("unknown metric '" + std::string(name) + "' (expected bleu or chrf)");
}

std::string metric_name(Metric m) { return m == Metric::bleu ? "BLEU" : "chrF2++"; }

NgramCounts& NgramCounts::operator+=(const NgramCounts& o) {
  auto add = [](std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (a.size() < b.size()) a.resize(b.size(), 0);
    for (std::size_t i = 0; i < b.size(); ++i) a[i] += b[i];
  };
  add(matches, o.matches);
  add(hyp_totals, o.hyp_totals);
  add(ref_totals, o.ref_totals);
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

std::vector<std::string> tokenize_13a(std::string_view text) {
  std::string line(text);
  replace_all(line, "<skipped>", "");
  replace_all(line, "-\n", "");
  replace_all(line, "\n", " ");
  if (line.find('&') != std::string::npos) {
    replace_all(line, "&quot;", "\"");
    replace_all(line, "&amp;", "&");
    replace_all(line, "&lt;", "<");
    replace_all(line, "&gt;", ">");
  }
  const std::u32string s = U" " + decode_utf8(line) + U" ";

  std::u32string a;
  for (char32_t c : s) {
    if (splits_13a(c)) {
      a += U' ';
      a += c;
      a += U' ';
    } else {
      a += c;
    }
  }
  // The remaining three rules match pairs left to right without overlap.
  auto pair_pass = [](const std::u32string& in, auto&& matches, auto&& emit) {
    std::u32string out;
    std::size_t i = 0;
    while (i < in.size()) {
      if (i + 1 < in.size() && matches(in[i], in[i + 1])) {
        emit(out, in[i], in[i + 1]);
        i += 2;
      } else {
        out += in[i++];
      }
    }
    return out;
  };
  auto dot_comma = [](char32_t c) { return c == U'.' || c == U','; };
  std::u32string b = pair_pass(
      a, [&](char32_t x, char32_t y) { return !is_digit(x) && dot_comma(y); },
      [](std::u32string& o, char32_t x, char32_t y) { o += {x, U' ', y, U' '}; });
  std::u32string c = pair_pass(
      b, [&](char32_t x, char32_t y) { return dot_comma(x) && !is_digit(y); },
      [](std::u32string& o, char32_t x, char32_t y) { o += {U' ', x, U' ', y}; });
  std::u32string d = pair_pass(
      c, [](char32_t x, char32_t y) { return is_digit(x) && y == U'-'; },
      [](std::u32string& o, char32_t x, char32_t y) { o += {x, U' ', y, U' '}; });

  std::vector<std::string> out;
  for (const auto& w : split_ws(d)) out.push_back(encode_utf8(w));
  return out;
}

NgramCounts bleu_counts(std::string_view hypothesis, std::string_view reference) {
  auto rstrip = [](std::string_view s) {
    const auto u = decode_utf8(s);
    std::size_t end = u.size();
    while (end > 0 && is_space(u[end - 1])) --end;
    return encode_utf8(std::u32string_view(u).substr(0, end));
  };
  const auto hyp = tokenize_13a(rstrip(hypothesis));
  const auto ref = tokenize_13a(rstrip(reference));
  const auto hn = word_ngrams(hyp, kBleuOrder);
  const auto rn = word_ngrams(ref, kBleuOrder);

  NgramCounts c = empty_counts(Metric::bleu);
  c.hyp_len = hyp.size();
  c.ref_len = ref.size();
  for (std::size_t n = 0; n < kBleuOrder; ++n)
    clip_counts(hn[n], rn[n], c.matches[n], c.hyp_totals[n], c.ref_totals[n]);
  return c;
}

NgramCounts chrf_counts(std::string_view hypothesis, std::string_view reference) {
  const auto hn = chrf_ngrams(decode_utf8(hypothesis));
  const auto rn = chrf_ngrams(decode_utf8(reference));
  NgramCounts c = empty_counts(Metric::chrf);
  for (std::size_t n = 0; n < hn.size(); ++n) {
    clip_counts(hn[n], rn[n], c.matches[n], c.hyp_totals[n], c.ref_totals[n]);
    // Hypothesis n-grams only count where the reference has some of that order.
    if (rn[n].empty()) c.hyp_totals[n] = 0;
  }
  return c;
}

NgramCounts segment_counts(Metric m, std::string_view hypothesis, std::string_view reference) {
  return m == Metric::bleu ? bleu_counts(hypothesis, reference)
                           : chrf_counts(hypothesis, reference);
}

double score_from_counts(Metric m, const NgramCounts& counts) {
  return m == Metric::bleu ? bleu_from_counts(counts) : chrf_from_counts(counts);
}

MetricScore corpus_score(Metric m, std::span<const std::string> hypotheses,
                         std::span<const std::string> references) {
  NgramCounts total = empty_counts(m);
  for (const auto& c : all_counts(m, hypotheses, references)) total += c;
  MetricScore s;
  s.value = s.ci_low = s.ci_high = score_from_counts(m, total);
  return s;
}

MetricScore bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  return corpus_score(Metric::bleu, hypotheses, references);
}

MetricScore chrf2pp(std::span<const std::string> hypotheses,
                    std::span<const std::string> references) {
  return corpus_score(Metric::chrf, hypotheses, references);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

MetricScore bootstrap_ci(std::span<const std::string> hypotheses,
                         std::span<const std::string> references, Metric m, std::size_t n,
                         std::uint64_t seed) {
  const auto segs = all_counts(m, hypotheses, references);
  if (segs.size() < 2) throw ContractError("bootstrap needs at least 2 sentences");
  if (n == 0) throw ContractError("bootstrap needs at least one resample");

  NgramCounts total = empty_counts(m);
  for (const auto& c : segs) total += c;

  SplitMix64 seeder(seed);
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    SplitMix64 sub(seeder.next());
    NgramCounts sample = empty_counts(m);
    for (std::size_t k = 0; k < segs.size(); ++k) sample += segs[sub.below(segs.size())];
    scores[i] = score_from_counts(m, sample);
  }

  MetricScore s;
  s.value = score_from_counts(m, total);
  s.ci_low = percentile(scores, 0.025);
  s.ci_high = percentile(scores, 0.975);
  s.n_resamples = n;
  s.seed = seed;
  return s;
}

std::string metric_signature(Metric m, const MetricScore& s) {
  std::string sig = metric_name(m) + "|nrefs:1";
  if (s.n_resamples > 0)
    sig += "|bs:" + std::to_string(s.n_resamples) + "|seed:" + std::to_string(s.seed);
  if (m == Metric::bleu) return sig + "|case:mixed|eff:no|tok:13a|smooth:exp";
  return sig + "|case:mixed|eff:yes|nc:6|nw:2|space:no";
}

std::string format_score(const MetricScore& s) {
  return fixed2(s.value) + "±" + fixed2(s.half_width());
}

std::string metric_report_json(Metric m, const MetricScore& s) {
  nlohmann::ordered_json j = {
      {"metric", metric_name(m)},
      {"value", s.value},
      {"ci_low", s.ci_low},
      {"ci_high", s.ci_high},
      {"n", s.n_resamples},
      {"seed", s.seed},
      {"signature", metric_signature(m, s)},
      {"display", format_score(s)},
  };
  return j.dump(2);
}

UnigramTable unigram_table(const std::vector<std::vector<std::string>>& sentences) {
  std::map<std::string, std::size_t> freq;
  for (const auto& s : sentences)
    for (const auto& t : s)
      if (t != "<pad>" && t != "<s>" && t != "</s>" && t != "<unk>") ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  UnigramTable t;
  for (auto& [tok, c] : items) {
    t.tokens.push_back(tok);
    t.counts.push_back(c);
  }
  return t;
}

std::vector<std::string> random_walk_baseline(const UnigramTable& table, std::size_t n_sentences,
                                              std::span<const std::size_t> lengths,
                                              SplitMix64& rng, bool uniform) {
  if (table.tokens.empty() || table.tokens.size() != table.counts.size())
    throw ContractError("random walk needs a non-empty frequency table");
  if (lengths.empty()) throw ContractError("random walk needs a length distribution");

  std::vector<std::size_t> cumulative(table.counts.size());
  std::partial_sum(table.counts.begin(), table.counts.end(), cumulative.begin());
  const std::size_t mass = cumulative.back();
  if (!uniform && mass == 0) throw ContractError("frequency table has zero mass");

  std::vector<std::string> out;
  out.reserve(n_sentences);
  for (std::size_t s = 0; s < n_sentences; ++s) {
    const std::size_t len = std::min(lengths[rng.below(lengths.size())], kMaxWalkLength);
    std::string line;
    for (std::size_t k = 0; k < len; ++k) {
      std::size_t idx;
      if (uniform) {
        idx = rng.below(table.tokens.size());
      } else {
        const auto r = rng.below(mass);
        idx = std::size_t(std::upper_bound(cumulative.begin(), cumulative.end(), r) -
                          cumulative.begin());
      }
      if (k) line += ' ';
      line += table.tokens[idx];
    }
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace slt
