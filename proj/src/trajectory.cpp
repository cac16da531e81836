#include "tinyrlhf/trajectory.hpp"

#include <iterator>

namespace tinyrlhf {

std::size_t Trajectory::unmasked_count() const noexcept {
  std::size_t n = 0;
  for (auto m : mask) n += m != 0;
  return n;
}

double Trajectory::total_reward() const noexcept {
  double s = 0.0;
  for (double r : rewards) s += r;
  return s;
}

std::vector<Token> Trajectory::tokens() const {
  std::vector<Token> out(prompt);
  out.insert(out.end(), response.begin(), response.end());
  return out;
}

std::size_t TrajectoryBatch::token_count() const noexcept {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.length();
  return n;
}

std::size_t TrajectoryBatch::unmasked_count() const noexcept {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.unmasked_count();
  return n;
}

void TrajectoryBatch::append(TrajectoryBatch&& other) {
  sequences.insert(sequences.end(), std::make_move_iterator(other.sequences.begin()),
                   std::make_move_iterator(other.sequences.end()));
  other.sequences.clear();
}

}  // namespace tinyrlhf
