#include "ut/tasks.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

namespace ut {

namespace vocab {

int id_of(char c) {
  if (c >= '0' && c <= '9') return 3 + (c - '0');
  if (c == '+') return kPlus;
  throw config_error(std::string("vocab: no id for character '") + c + "'");
}

char char_of(int id) {
  if (id >= 3 && id <= 12) return static_cast<char>('0' + (id - 3));
  if (id == kPlus) return '+';
  throw config_error("vocab: id " + std::to_string(id) +
                     " has no character form");
}

std::vector<int> encode(const std::string& s) {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (char c : s) ids.push_back(id_of(c));
  return ids;
}

std::string decode(const std::vector<int>& ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) s += char_of(id);
  return s;
}

}  // namespace vocab

std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kAddition: return "addition";
    case TaskKind::kDouble: return "double";
  }
  return "?";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "addition") return TaskKind::kAddition;
  if (s == "double") return TaskKind::kDouble;
  throw config_error("unknown task '" + s +
                     "' (expected copy, reverse, addition or double)");
}

namespace {

std::string random_digits(int len, Rng& rng) {
  std::string s(len, '0');
  for (int i = 0; i < len; ++i)
    s[i] = static_cast<char>('0' + rng.uniform_int(0, 9));
  return s;
}

// Value uniform over the numbers with exactly `count` digits; no leading
// zeros except the single-digit 0.
std::string random_number_exact(int count, Rng& rng) {
  std::string s(count, '0');
  s[0] = static_cast<char>((count == 1 ? '0' : '1') +
                           rng.uniform_int(0, count == 1 ? 9 : 8));
  for (int i = 1; i < count; ++i)
    s[i] = static_cast<char>('0' + rng.uniform_int(0, 9));
  return s;
}

// Digit-count uniform, then value uniform within the count.
std::string random_number(int max_digits, Rng& rng) {
  return random_number_exact(
      static_cast<int>(rng.uniform_int(1, max_digits)), rng);
}

std::string string_add(const std::string& a, const std::string& b) {
  std::string out;
  int i = static_cast<int>(a.size()) - 1;
  int j = static_cast<int>(b.size()) - 1;
  int carry = 0;
  while (i >= 0 || j >= 0 || carry != 0) {
    int s = carry;
    if (i >= 0) s += a[i--] - '0';
    if (j >= 0) s += b[j--] - '0';
    out += static_cast<char>('0' + s % 10);
    carry = s / 10;
  }
  std::reverse(out.begin(), out.end());
  // strip leading zeros ("0"+"0" stays "0")
  const auto nz = out.find_first_not_of('0');
  return nz == std::string::npos ? "0" : out.substr(nz);
}

TaskSample finish(const std::string& src, const std::string& tgt) {
  TaskSample s;
  s.src = vocab::encode(src);
  s.tgt = vocab::encode(tgt);
  s.tgt.push_back(vocab::kEos);
  return s;
}

void check_len(int len) {
  if (len < 1)
    throw config_error("task generator: len must be >= 1, got " +
                       std::to_string(len));
}

}  // namespace

TaskSample gen_copy(int len, Rng& rng) {
  check_len(len);
  const std::string s = random_digits(len, rng);
  return finish(s, s);
}

TaskSample gen_reverse(int len, Rng& rng) {
  check_len(len);
  const std::string s = random_digits(len, rng);
  std::string r(s.rbegin(), s.rend());
  return finish(s, r);
}

TaskSample gen_addition(int len, Rng& rng) {
  check_len(len);
  const std::string a = random_number(len, rng);
  const std::string b = random_number(len, rng);
  return finish(a + "+" + b, string_add(a, b));
}

TaskSample gen_double(int len, Rng& rng) {
  check_len(len);
  const std::string a = random_number(len, rng);
  return finish(a, string_add(a, a));
}

TaskSample gen_sample(TaskKind task, int len, Rng& rng) {
  switch (task) {
    case TaskKind::kCopy: return gen_copy(len, rng);
    case TaskKind::kReverse: return gen_reverse(len, rng);
    case TaskKind::kAddition: return gen_addition(len, rng);
    case TaskKind::kDouble: return gen_double(len, rng);
  }
  throw config_error("gen_sample: bad task");
}

int sample_offset(Rng& rng, int max_offset) {
  if (max_offset < 0)
    throw config_error("sample_offset: max_offset must be >= 0");
  if (max_offset == 0) return 0;
  return static_cast<int>(rng.uniform_int(0, max_offset));
}

Batch make_batch(const std::vector<TaskSample>& samples, int src_len,
                 int tgt_len) {
  if (samples.empty()) throw config_error("make_batch: no samples");
  Batch b;
  b.batch = static_cast<int>(samples.size());
  // encoder rows are framed with a trailing EOS so the model can see where
  // the source ends
  b.src_len = src_len + 1;
  b.tgt_len = tgt_len;
  b.src.assign(static_cast<std::size_t>(b.batch) * b.src_len, vocab::kPad);
  b.tgt_in.assign(static_cast<std::size_t>(b.batch) * tgt_len, vocab::kPad);
  b.tgt_out.assign(static_cast<std::size_t>(b.batch) * tgt_len, vocab::kPad);
  b.src_mask.assign(b.src.size(), 0.0);
  b.tgt_mask.assign(b.tgt_in.size(), 0.0);
  for (int s = 0; s < b.batch; ++s) {
    const TaskSample& smp = samples[s];
    const int ns = static_cast<int>(smp.src.size());
    const int nt = static_cast<int>(smp.tgt.size());
    if (ns > src_len || nt > tgt_len)
      throw config_error("make_batch: sample " + std::to_string(s) +
                         " (src " + std::to_string(ns) + ", tgt " +
                         std::to_string(nt) + ") does not fit " +
                         std::to_string(src_len) + "/" +
                         std::to_string(tgt_len));
    b.src_real_len.push_back(ns + 1);
    b.tgt_real_len.push_back(nt);
    b.offsets.push_back(smp.offset);
    for (int i = 0; i < ns; ++i) {
      b.src[static_cast<std::size_t>(s) * b.src_len + i] = smp.src[i];
      b.src_mask[static_cast<std::size_t>(s) * b.src_len + i] = 1.0;
    }
    b.src[static_cast<std::size_t>(s) * b.src_len + ns] = vocab::kEos;
    b.src_mask[static_cast<std::size_t>(s) * b.src_len + ns] = 1.0;
    // teacher forcing: inputs are the target shifted right behind BOS
    b.tgt_in[static_cast<std::size_t>(s) * tgt_len] = vocab::kBos;
    for (int i = 0; i < nt; ++i) {
      b.tgt_out[static_cast<std::size_t>(s) * tgt_len + i] = smp.tgt[i];
      b.tgt_mask[static_cast<std::size_t>(s) * tgt_len + i] = 1.0;
      if (i + 1 < nt)
        b.tgt_in[static_cast<std::size_t>(s) * tgt_len + i + 1] = smp.tgt[i];
    }
  }
  return b;
}

namespace {

std::uint64_t fnv1a(const std::string& s, std::uint64_t h) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

SampleStream::SampleStream(const StreamSpec& spec) : spec_(spec) {
  if (spec.min_len < 1 || spec.max_len < spec.min_len)
    throw config_error("sample stream: bad length range [" +
                       std::to_string(spec.min_len) + "," +
                       std::to_string(spec.max_len) + "]");
  if (spec.max_offset < 0)
    throw config_error("sample stream: max_offset must be >= 0");
  std::uint64_t h = 0xCBF29CE484222325ULL;
  h = fnv1a(to_string(spec.task), h);
  h = fnv1a("/" + spec.split + "/", h);
  stream_seed_ = h ^ (spec.seed * 0x9E3779B97F4A7C15ULL);
}

TaskSample SampleStream::at(std::size_t index) const {
  Rng rng(stream_seed_ ^
          (0xD1B54A32D192ED03ULL * static_cast<std::uint64_t>(index + 1)));
  const auto draw_len = [&] {
    return spec_.min_len == spec_.max_len
               ? spec_.min_len
               : static_cast<int>(
                     rng.uniform_int(spec_.min_len, spec_.max_len));
  };
  // Numeric tasks apply the length range to digit counts, so a fixed-length
  // split really is longer than every sample of a shorter-range split.
  TaskSample s;
  switch (spec_.task) {
    case TaskKind::kCopy:
      s = gen_copy(draw_len(), rng);
      break;
    case TaskKind::kReverse:
      s = gen_reverse(draw_len(), rng);
      break;
    case TaskKind::kAddition: {
      const std::string a = random_number_exact(draw_len(), rng);
      const std::string b = random_number_exact(draw_len(), rng);
      s = finish(a + "+" + b, string_add(a, b));
      break;
    }
    case TaskKind::kDouble: {
      const std::string a = random_number_exact(draw_len(), rng);
      s = finish(a, string_add(a, a));
      break;
    }
  }
  s.offset = sample_offset(rng, spec_.max_offset);
  return s;
}

void write_tsv(std::ostream& os, const SampleStream& stream, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const TaskSample s = stream.at(i);
    std::vector<int> tgt(s.tgt.begin(), s.tgt.end() - 1);  // drop EOS
    os << vocab::decode(s.src) << '\t' << vocab::decode(tgt) << '\n';
  }
}

std::vector<TaskSample> read_tsv(std::istream& is) {
  std::vector<TaskSample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw config_error("tsv: line without tab: " + line);
    TaskSample s;
    s.src = vocab::encode(line.substr(0, tab));
    s.tgt = vocab::encode(line.substr(tab + 1));
    s.tgt.push_back(vocab::kEos);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ut
