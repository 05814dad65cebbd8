#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace slt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecials = 4;

/// Token <-> id map. Ids 0-3 are the specials (PAD, BOS, EOS, UNK); ordinary
/// tokens follow in order of decreasing training frequency, ties broken by
/// byte-wise token order.
class Vocabulary {
 public:
  Vocabulary();

  /// Builds from tokenized training sentences keeping tokens seen at least
  /// `min_freq` times.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences,
                          std::size_t min_freq = 1);

  /// Restores a vocabulary from its id-ordered token list (specials included).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  /// UNK for unseen tokens.
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Token ids, optionally terminated with EOS.
  std::vector<int> encode(const std::vector<std::string>& tokens, bool append_eos = true) const;

  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace slt
