#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "boundless/random.hpp"

namespace boundless {

/// Output label of the Price Tagging task. The numeric value is the logit
/// index used by every network head.
enum class Label : std::uint8_t { Yes = 0, No = 1 };

inline constexpr std::size_t kNumLabels = 2;

std::string_view to_string(Label label);
Label label_from_string(std::string_view text);
inline Label label_from_bool(bool yes) { return yes ? Label::Yes : Label::No; }
inline std::size_t label_index(Label label) { return static_cast<std::size_t>(label); }

namespace task {

inline constexpr int kMaxCents = 999;
inline constexpr int kMinWidth = 250;
inline constexpr int kMaxWidth = 750;

/// One Price Tagging query: "yes only if lower <= amount <= upper".
/// Amounts are integer cents.
struct TaskInstance {
  int lower = 0;
  int upper = 0;
  int amount = 0;
  Label gold = Label::No;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

/// Builds an instance and computes its gold label (inclusive bracket).
TaskInstance make_instance(int lower, int upper, int amount);

/// True when all amounts are on the cent grid, the bracket width is within
/// [kMinWidth, kMaxWidth], and gold matches the bracket test.
bool is_valid(const TaskInstance& instance);

/// Uniform draw over valid (lower, upper) pairs and amounts.
TaskInstance gen_task_instance(Rng& rng);
TaskInstance gen_task_instance(std::uint64_t seed);

std::vector<TaskInstance> gen_task_dataset(std::size_t n, std::uint64_t seed);

// Token encoding: per amount three digit tokens (units, tenths, hundredths)
// followed by a separator, for lower, upper and amount in that order.
inline constexpr std::uint8_t kSeparator = 10;
inline constexpr std::size_t kVocabSize = 11;
inline constexpr std::size_t kSeqLen = 12;
/// Position of the separator that precedes the query amount's first digit.
inline constexpr std::size_t kQueryPrefixPosition = 7;

struct EncodedInput {
  std::array<std::uint8_t, kSeqLen> tokens{};

  friend bool operator==(const EncodedInput&, const EncodedInput&) = default;
};

EncodedInput encode(const TaskInstance& instance);
/// Inverse of encode. Throws FormatError on malformed token sequences.
TaskInstance decode(const EncodedInput& input);

std::vector<EncodedInput> encode_all(std::span<const TaskInstance> instances);

/// CSV with header lower_cents,upper_cents,amount_cents,gold.
void write_csv(std::ostream& out, std::span<const TaskInstance> instances);
std::vector<TaskInstance> read_csv(std::istream& in);

}  // namespace task
}  // namespace boundless
