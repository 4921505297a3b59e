#pragma once

// Synthetic sequence tasks: copy / reverse / integer addition plus the
// memorization double task, with deterministic streams keyed by
// (task, seed, split) and the randomized position-offset protocol.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ut/tensor.hpp"

namespace ut {

// Fixed vocabulary: PAD=0, BOS=1, EOS=2, '0'..'9'=3..12, '+'=13.
namespace vocab {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kPlus = 13;
constexpr int kSize = 14;

int id_of(char c);
char char_of(int id);
std::vector<int> encode(const std::string& s);
std::string decode(const std::vector<int>& ids);
}  // namespace vocab

enum class TaskKind { kCopy, kReverse, kAddition, kDouble };

std::string to_string(TaskKind t);
TaskKind task_from_string(const std::string& s);

struct TaskSample {
  std::vector<int> src;  // no PAD
  std::vector<int> tgt;  // ends with EOS
  int offset = 0;
};

TaskSample gen_copy(int len, Rng& rng);
TaskSample gen_reverse(int len, Rng& rng);
// Two digit-count-uniform operands, "a+b" -> digits of a+b.
TaskSample gen_addition(int len, Rng& rng);
// Number of up to `len` digits doubled.
TaskSample gen_double(int len, Rng& rng);
TaskSample gen_sample(TaskKind task, int len, Rng& rng);

// Uniform integer in [0, max_offset].
int sample_offset(Rng& rng, int max_offset);

struct Batch {
  int batch = 0;
  int src_len = 0, tgt_len = 0;
  std::vector<int> src;                  // B x src_len, PAD-filled
  std::vector<int> tgt_in, tgt_out;      // B x tgt_len; tgt_in = BOS + tgt[:-1]
  std::vector<double> src_mask, tgt_mask;
  std::vector<int> src_real_len, tgt_real_len;
  std::vector<int> offsets;
};

Batch make_batch(const std::vector<TaskSample>& samples, int src_len,
                 int tgt_len);

struct StreamSpec {
  TaskKind task = TaskKind::kCopy;
  std::string split = "train";  // part of the stream key
  int min_len = 1, max_len = 8; // sample length drawn uniformly
  int max_offset = 0;           // 0 in eval splits
  std::uint64_t seed = 0;
};

// Pure function of (spec, index): the same spec always replays the same
// samples, from any index, on any thread.
class SampleStream {
 public:
  explicit SampleStream(const StreamSpec& spec);
  TaskSample at(std::size_t index) const;
  const StreamSpec& spec() const { return spec_; }

 private:
  StreamSpec spec_;
  std::uint64_t stream_seed_;
};

// `src<TAB>tgt` per line (EOS not written).
void write_tsv(std::ostream& os, const SampleStream& stream, std::size_t n);
std::vector<TaskSample> read_tsv(std::istream& is);

}  // namespace ut
