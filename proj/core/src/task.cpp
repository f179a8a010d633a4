#include "boundless/task.hpp"

#include <istream>
#include <ostream>
#include <sstream>

#include "boundless/errors.hpp"

namespace boundless {

std::string_view to_string(Label label) { return label == Label::Yes ? "Yes" : "No"; }

Label label_from_string(std::string_view text) {
  if (text == "Yes") return Label::Yes;
  if (text == "No") return Label::No;
  throw FormatError("unknown label '" + std::string(text) + "'");
}

namespace task {

TaskInstance make_instance(int lower, int upper, int amount) {
  return TaskInstance{lower, upper, amount, label_from_bool(lower <= amount && amount <= upper)};
}

bool is_valid(const TaskInstance& i) {
  auto on_grid = [](int c) { return c >= 0 && c <= kMaxCents; };
  const int width = i.upper - i.lower;
  return on_grid(i.lower) && on_grid(i.upper) && on_grid(i.amount) && width >= kMinWidth &&
         width <= kMaxWidth && i.gold == make_instance(i.lower, i.upper, i.amount).gold;
}

TaskInstance gen_task_instance(Rng& rng) {
  // Rejection keeps the draw uniform over the valid (lower, upper) pairs.
  for (;;) {
    const int lower = static_cast<int>(rng.between(0, kMaxCents));
    const int upper = static_cast<int>(rng.between(0, kMaxCents));
    const int width = upper - lower;
    if (width < kMinWidth || width > kMaxWidth) continue;
    const int amount = static_cast<int>(rng.between(0, kMaxCents));
    return make_instance(lower, upper, amount);
  }
}

TaskInstance gen_task_instance(std::uint64_t seed) {
  Rng rng(seed);
  return gen_task_instance(rng);
}

std::vector<TaskInstance> gen_task_dataset(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TaskInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_task_instance(rng));
  return out;
}

EncodedInput encode(const TaskInstance& instance) {
  EncodedInput e;
  const int amounts[3] = {instance.lower, instance.upper, instance.amount};
  std::size_t pos = 0;
  for (int cents : amounts) {
    if (cents < 0 || cents > kMaxCents) {
      throw FormatError("amount " + std::to_string(cents) + " cents outside [0, 999]");
    }
    e.tokens[pos++] = static_cast<std::uint8_t>(cents / 100);
    e.tokens[pos++] = static_cast<std::uint8_t>((cents / 10) % 10);
    e.tokens[pos++] = static_cast<std::uint8_t>(cents % 10);
    e.tokens[pos++] = kSeparator;
  }
  return e;
}

TaskInstance decode(const EncodedInput& input) {
  int amounts[3] = {0, 0, 0};
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t d = 0; d < 3; ++d) {
      const std::uint8_t tok = input.tokens[a * 4 + d];
      if (tok > 9) {
        throw FormatError("expected digit token at position " + std::to_string(a * 4 + d));
      }
      amounts[a] = amounts[a] * 10 + tok;
    }
    if (input.tokens[a * 4 + 3] != kSeparator) {
      throw FormatError("expected separator at position " + std::to_string(a * 4 + 3));
    }
  }
  return make_instance(amounts[0], amounts[1], amounts[2]);
}

std::vector<EncodedInput> encode_all(std::span<const TaskInstance> instances) {
  std::vector<EncodedInput> out;
  out.reserve(instances.size());
  for (const auto& i : instances) out.push_back(encode(i));
  return out;
}

void write_csv(std::ostream& out, std::span<const TaskInstance> instances) {
  out << "lower_cents,upper_cents,amount_cents,gold\n";
  for (const auto& i : instances) {
    out << i.lower << ',' << i.upper << ',' << i.amount << ',' << to_string(i.gold) << '\n';
  }
}

std::vector<TaskInstance> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "lower_cents,upper_cents,amount_cents,gold") {
    throw FormatError("task CSV: missing header 'lower_cents,upper_cents,amount_cents,gold'");
  }
  std::vector<TaskInstance> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string f[4];
    for (auto& field : f) {
      if (!std::getline(row, field, ',')) {
        throw FormatError("task CSV line " + std::to_string(line_no) + ": expected 4 fields");
      }
    }
    try {
      TaskInstance i{std::stoi(f[0]), std::stoi(f[1]), std::stoi(f[2]), label_from_string(f[3])};
      if (i.gold != make_instance(i.lower, i.upper, i.amount).gold) {
        throw FormatError("gold label disagrees with bracket");
      }
      out.push_back(i);
    } catch (const std::exception& e) {
      throw FormatError("task CSV line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace task
}  // namespace boundless
