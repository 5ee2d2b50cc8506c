#ifndef FUNDUSAM_PEFT_HPP
#define FUNDUSAM_PEFT_HPP

// Trainable / frozen partition of the model parameters.
//
//   peft    : adapters + CBAM train; base encoder, prompt encoder and decoder frozen
//   full    : everything trains (fine-tuning a loaded base)
//   scratch : everything trains (no pretrained base available)

#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fundusam/parameters.hpp"

namespace fundusam {

enum class TrainMode { Peft, Full, Scratch };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Peft: return "peft";
    case TrainMode::Full: return "full";
    case TrainMode::Scratch: return "scratch";
  }
  return "peft";
}

inline TrainMode parse_mode(std::string_view s) {
  if (s == "peft") return TrainMode::Peft;
  if (s == "full") return TrainMode::Full;
  if (s == "scratch") return TrainMode::Scratch;
  throw InvalidArgument("unknown training mode: " + std::string(s));
}

struct PartitionEntry {
  std::string name;
  ParamTag tag;
  std::size_t numel;
  bool trainable;
};

struct ParameterPartition {
  std::vector<PartitionEntry> entries;
  std::map<ParamTag, bool> tag_trainable;

  [[nodiscard]] std::size_t total() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.numel;
    return n;
  }
  [[nodiscard]] std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.trainable ? e.numel : 0;
    return n;
  }
  [[nodiscard]] std::size_t count_for(ParamTag t) const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.tag == t ? e.numel : 0;
    return n;
  }

  /// Per-tag census, one line per tag.
  [[nodiscard]] std::string census() const {
    std::ostringstream os;
    os << "tag\tparams\ttrainable\n";
    for (auto t : kAllTags) {
      const auto it = tag_trainable.find(t);
      os << tag_name(t) << '\t' << count_for(t) << '\t' << ((it != tag_trainable.end() && it->second) ? "yes" : "no")
         << '\n';
    }
    os << "total\t" << total() << '\t' << trainable_count() << '\n';
    return os.str();
  }
};

inline std::map<ParamTag, bool> trainable_tags(TrainMode mode) {
  std::map<ParamTag, bool> m;
  for (auto t : kAllTags) m[t] = mode != TrainMode::Peft;
  if (mode == TrainMode::Peft) {
    m[ParamTag::Adapter] = true;
    m[ParamTag::Cbam] = true;
  }
  return m;
}

template <typename T>
ParameterPartition partition_parameters(const ParameterStore<T>& store, TrainMode mode) {
  ParameterPartition p;
  p.tag_trainable = trainable_tags(mode);
  p.entries.reserve(store.size());
  for (const auto& param : store.all()) {
    p.entries.push_back({param.name, param.tag, param.numel(), p.tag_trainable.at(param.tag)});
  }
  return p;
}

inline double trainable_fraction(const ParameterPartition& p) {
  const auto total = p.total();
  if (total == 0) return 0.0;
  return static_cast<double>(p.trainable_count()) / static_cast<double>(total);
}

/// Copy of every parameter value, in registration order.
template <typename T>
using Snapshot = std::vector<ag::Matrix<T>>;

template <typename T>
Snapshot<T> snapshot(const ParameterStore<T>& store) {
  Snapshot<T> s;
  s.reserve(store.size());
  for (const auto& p : store.all()) s.push_back(p.var.value());
  return s;
}

struct FreezeViolation {
  std::string name;
  ParamTag tag;
  double max_abs_change;
};

struct FreezeReport {
  bool pass = true;
  std::vector<FreezeViolation> violators;
  std::map<ParamTag, std::size_t> changed_per_tag;  // parameters (tensors) whose values moved

  [[nodiscard]] std::string summary() const {
    std::ostringstream os;
    os << (pass ? "frozen parameters unchanged" : "frozen parameters modified");
    for (const auto& v : violators) os << "\n  " << tag_name(v.tag) << ' ' << v.name << " max|delta|=" << v.max_abs_change;
    return os.str();
  }
};

/// Frozen parameters must be bitwise identical between the snapshots.
template <typename T>
FreezeReport verify_frozen(const Snapshot<T>& before, const Snapshot<T>& after, const ParameterPartition& p) {
  if (before.size() != after.size() || before.size() != p.entries.size()) {
    throw InvalidArgument("verify_frozen: snapshots do not match the partition");
  }
  FreezeReport r;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& a = before[i];
    const auto& b = after[i];
    if (a.rows() != b.rows() || a.cols() != b.cols() ||
        static_cast<std::size_t>(a.size()) != p.entries[i].numel) {
      throw InvalidArgument("verify_frozen: shape mismatch for " + p.entries[i].name);
    }
    const bool identical = a.size() == 0 ||
                           std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(T)) == 0;
    if (!identical) {
      ++r.changed_per_tag[p.entries[i].tag];
      if (!p.entries[i].trainable) {
        r.pass = false;
        const double delta = static_cast<double>((a - b).cwiseAbs().maxCoeff());
        r.violators.push_back({p.entries[i].name, p.entries[i].tag, delta});
      }
    }
  }
  return r;
}

}  // namespace fundusam

#endif  // FUNDUSAM_PEFT_HPP
