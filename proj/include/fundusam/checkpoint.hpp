#ifndef FUNDUSAM_CHECKPOINT_HPP
#define FUNDUSAM_CHECKPOINT_HPP

// Checkpoint container, little-endian:
//
//   char[8]  magic "FSAMCKPT"
//   u32      format version (1)
//   u32      scalar size in bytes (4 = float, 8 = double)
//   u64      architecture hash
//   u64 + n  canonical config text
//   u64      epochs completed
//   u32 C, f64[C] mean, f64[C] stddev      input normalisation
//   u32      parameter count, then per parameter:
//              u32 + n name, u8 tag, u8 trainable, u32 rows, u32 cols, T[rows*cols]
//   u64      optimizer step, u32 state count, then per trainable parameter
//              (registration order): T[rows*cols] first moment, T[rows*cols] second moment

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fundusam/config.hpp"
#include "fundusam/data.hpp"
#include "fundusam/model.hpp"
#include "fundusam/optim.hpp"
#include "fundusam/peft.hpp"

namespace fundusam {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'A', 'M', 'C', 'K', 'P', 'T'};

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::uint64_t limit) {
  const auto n = read_le<std::uint64_t>(is);
  if (n > limit) throw IngestionError("checkpoint: string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IngestionError("checkpoint: truncated");
  return s;
}

template <typename T>
void write_matrix(std::ostream& os, const ag::Matrix<T>& m) {
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
}

template <typename T>
ag::Matrix<T> read_matrix(std::istream& is, ag::Index rows, ag::Index cols) {
  ag::Matrix<T> m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
  if (!is) throw IngestionError("checkpoint: truncated tensor data");
  return m;
}

}  // namespace detail

/// Everything needed to resume or evaluate a run.
template <typename T>
struct Checkpoint {
  RunConfig config;
  std::uint64_t arch_hash = 0;
  std::uint64_t epochs_completed = 0;
  NormStats norm;

  struct Tensor {
    std::string name;
    ParamTag tag;
    bool trainable;
    ag::Matrix<T> value;
  };
  std::vector<Tensor> tensors;

  std::uint64_t optimizer_steps = 0;
  std::vector<ag::Matrix<T>> first_moments;
  std::vector<ag::Matrix<T>> second_moments;
};

template <typename T>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const FunduSam<T>& model,
                     const ParameterPartition& partition, const Adam<T>* optimizer, std::uint64_t epochs_completed,
                     const NormStats& norm) {
  const auto& params = model.parameters().all();
  if (partition.entries.size() != params.size()) throw InvalidArgument("save_checkpoint: partition mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError("cannot open for writing: " + path);
  os.write(detail::kCheckpointMagic, 8);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, sizeof(T));
  detail::write_le<std::uint64_t>(os, architecture_hash(cfg));
  detail::write_string(os, serialize_config(cfg));
  detail::write_le<std::uint64_t>(os, epochs_completed);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(norm.mean.size()));
  for (double v : norm.mean) detail::write_le<double>(os, v);
  for (double v : norm.stddev) detail::write_le<double>(os, v);

  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    detail::write_string(os, p.name);
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.tag));
    detail::write_le<std::uint8_t>(os, partition.entries[i].trainable ? 1 : 0);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.rows));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.cols));
    detail::write_matrix(os, p.var.value());
  }

  detail::write_le<std::uint64_t>(os, optimizer ? optimizer->steps() : 0);
  const std::size_t n_state = optimizer ? optimizer->first_moments().size() : 0;
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(n_state));
  for (std::size_t k = 0; k < n_state; ++k) {
    detail::write_matrix(os, optimizer->first_moments()[k]);
    detail::write_matrix(os, optimizer->second_moments()[k]);
  }
  if (!os) throw IngestionError("write failed: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) throw IngestionError("not a checkpoint: " + path);
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IngestionError("unsupported checkpoint version " + std::to_string(version));
  const auto scalar = detail::read_le<std::uint32_t>(is);
  if (scalar != sizeof(T)) throw IngestionError("checkpoint scalar type differs from the requested one");

  Checkpoint<T> ck;
  ck.arch_hash = detail::read_le<std::uint64_t>(is);
  ck.config = parse_config(detail::read_string(is, 1u << 20));
  if (architecture_hash(ck.config) != ck.arch_hash) {
    throw IngestionError("checkpoint: stored hash " + hex64(ck.arch_hash) + " does not match its config (" +
                         hex64(architecture_hash(ck.config)) + ")");
  }
  ck.epochs_completed = detail::read_le<std::uint64_t>(is);
  const auto channels = detail::read_le<std::uint32_t>(is);
  if (channels > 64) throw IngestionError("checkpoint: implausible channel count");
  for (std::uint32_t c = 0; c < channels; ++c) ck.norm.mean.push_back(detail::read_le<double>(is));
  for (std::uint32_t c = 0; c < channels; ++c) ck.norm.stddev.push_back(detail::read_le<double>(is));

  const auto count = detail::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    typename Checkpoint<T>::Tensor t;
    t.name = detail::read_string(is, 4096);
    const auto tag = detail::read_le<std::uint8_t>(is);
    if (tag >= kAllTags.size()) throw IngestionError("checkpoint: bad parameter tag");
    t.tag = static_cast<ParamTag>(tag);
    t.trainable = detail::read_le<std::uint8_t>(is) != 0;
    const auto rows = detail::read_le<std::uint32_t>(is);
    const auto cols = detail::read_le<std::uint32_t>(is);
    t.value = detail::read_matrix<T>(is, rows, cols);
    ck.tensors.push_back(std::move(t));
  }

  ck.optimizer_steps = detail::read_le<std::uint64_t>(is);
  const auto n_state = detail::read_le<std::uint32_t>(is);
  std::vector<const typename Checkpoint<T>::Tensor*> trainable;
  for (const auto& t : ck.tensors) {
    if (t.trainable) trainable.push_back(&t);
  }
  if (n_state != 0 && n_state != trainable.size()) throw IngestionError("checkpoint: optimizer state count mismatch");
  for (std::uint32_t k = 0; k < n_state; ++k) {
    const auto r = trainable[k]->value.rows();
    const auto c = trainable[k]->value.cols();
    ck.first_moments.push_back(detail::read_matrix<T>(is, r, c));
    ck.second_moments.push_back(detail::read_matrix<T>(is, r, c));
  }
  return ck;
}

/// Requires `expected` to have the checkpoint's architecture; the error names both hashes.
inline void require_compatible(const RunConfig& expected, std::uint64_t stored_hash) {
  const auto h = architecture_hash(expected);
  if (h != stored_hash) {
    throw ConfigError("config/checkpoint mismatch: config architecture hash " + hex64(h) + ", checkpoint " +
                      hex64(stored_hash));
  }
}

/// Copies stored values into a model built from the same configuration.
template <typename T>
void load_weights(FunduSam<T>& model, const Checkpoint<T>& ck) {
  auto& params = model.parameters().all();
  if (params.size() != ck.tensors.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ck.tensors.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ck.tensors[i];
    if (t.name != params[i].name || t.tag != params[i].tag || t.value.rows() != params[i].rows ||
        t.value.cols() != params[i].cols) {
      throw ConfigError("checkpoint parameter '" + t.name + "' does not match model parameter '" + params[i].name + "'");
    }
    params[i].var.mutable_value() = t.value;
  }
}

}  // namespace fundusam

#endif  // FUNDUSAM_CHECKPOINT_HPP
