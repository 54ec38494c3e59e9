#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "corelm/decoder.hpp"
#include "corelm/ops.hpp"

namespace corelm::testing {

// Hand-built language model: each row is produced by the row function
// from the prefix ending at that position, then log-softmaxed.
class ScriptedModel : public LanguageModel {
 public:
  using RowFn = std::function<std::vector<double>(std::span<const TokenId> prefix)>;

  ScriptedModel(std::size_t vocab, std::size_t context, RowFn fn)
      : vocab_(vocab), context_(context), fn_(std::move(fn)) {}

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t context_window() const override { return context_; }

  Tensor next_token_log_probs(std::span<const TokenId> tokens, std::span<const EntityId>,
                              const EntityStore*) const override {
    std::vector<double> rows;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto r = fn_(tokens.subspan(0, i + 1));
      rows.insert(rows.end(), r.begin(), r.end());
    }
    return log_softmax_rows(Tensor::matrix(tokens.size(), vocab_, std::move(rows)));
  }

  Tensor entity_hidden(std::span<const TokenId> tokens) const override {
    ++hidden_calls;
    hidden_inputs.emplace_back(tokens.begin(), tokens.end());
    // Row i = [u_i, 2 u_i, 0, 1]: depends on the token only.
    Tensor h = Tensor::zeros({tokens.size(), 4});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      h.at(i, 0) = static_cast<double>(tokens[i]);
      h.at(i, 1) = 2.0 * static_cast<double>(tokens[i]);
      h.at(i, 3) = 1.0;
    }
    return h;
  }

  mutable int hidden_calls = 0;
  mutable std::vector<std::vector<TokenId>> hidden_inputs;

 private:
  std::size_t vocab_;
  std::size_t context_;
  RowFn fn_;
};

inline ScriptedModel uniform_model(std::size_t vocab, std::size_t context) {
  return ScriptedModel(vocab, context, [vocab](std::span<const TokenId>) { return std::vector<double>(vocab, 0.0); });
}

// Puts all mass on (last + 1) mod vocab.
inline ScriptedModel successor_model(std::size_t vocab, std::size_t context) {
  return ScriptedModel(vocab, context, [vocab](std::span<const TokenId> prefix) {
    std::vector<double> row(vocab, -1e9);
    row[static_cast<std::size_t>((prefix.back() + 1) % static_cast<TokenId>(vocab))] = 0.0;
    return row;
  });
}

}  // namespace corelm::testing
