#include "slt/vocab.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "slt/errors.hpp"

namespace slt {

Vocabulary::Vocabulary()
    : Vocabulary(std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>"}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < std::size_t(kNumSpecials)) {
    throw FormatError("vocabulary needs at least the 4 special tokens");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], int(i)).second) {
      throw FormatError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences,
                             std::size_t min_freq) {
  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : sentences) {
    for (const auto& tok : sentence) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary base;
  std::vector<std::string> tokens = base.tokens_;
  for (const auto& [tok, n] : ranked) {
    if (n >= min_freq && !base.contains(tok)) tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || std::size_t(id) >= tokens_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(tokens_.size()));
  }
  return tokens_[std::size_t(id)];
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens,
                                    bool append_eos) const {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 1);
  for (const auto& t : tokens) ids.push_back(id(t));
  if (append_eos) ids.push_back(kEosId);
  return ids;
}

}  // namespace slt
