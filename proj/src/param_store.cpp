// SPDX-License-Identifier: Apache-2.0
#include "sml/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sml {

void ParamStore::add(std::string name, Tensor tensor) {
  if (!tensor.defined()) throw std::invalid_argument("ParamStore: undefined tensor for '" + name + "'");
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate entry '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

void ParamStore::set(const std::string& name, Tensor tensor) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no entry '" + name + "'");
  entries_[it->second].second = std::move(tensor);
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no entry '" + name + "'");
  return entries_[it->second].second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no entry '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamStore::total_numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

bool ParamStore::congruent(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
  }
  return true;
}

ParamStore ParamStore::snapshot() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t.clone());
  return out;
}

void ParamStore::restore(const ParamStore& snapshot) {
  if (!congruent(snapshot)) throw std::invalid_argument("ParamStore::restore: stores are not congruent");
  for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].second.assign(snapshot.entries_[i].second);
}

ParamStore ParamStore::gradients() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) {
    if (t.has_grad()) {
      auto g = t.grad();
      out.add(name, Tensor(t.shape(), std::vector<Real>(g.begin(), g.end())));
    } else {
      out.add(name, Tensor::zeros(t.shape()));
    }
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) {
    if (t.has_grad()) t.zero_grad();
  }
}

void ParamStore::clear_grad() {
  for (auto& [_, t] : entries_) t.clear_grad();
}

void ParamStore::set_requires_grad(bool value) {
  for (auto& [_, t] : entries_) t.set_requires_grad(value);
}

std::vector<Real> ParamStore::flatten() const {
  std::vector<Real> out;
  out.reserve(total_numel());
  for (const auto& [_, t] : entries_) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

void sgd_step(ParamStore& params, const ParamStore& grads, Real lr) {
  if (!std::isfinite(lr)) throw std::invalid_argument("sgd_step: learning rate must be finite");
  if (!params.congruent(grads)) throw std::invalid_argument("sgd_step: parameter and gradient stores are not congruent");
  auto git = grads.begin();
  for (auto& [_, p] : params) {
    auto pd = p.data_mut();
    auto gd = git->second.data();
    for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
    ++git;
  }
}

Real global_norm(const ParamStore& grads) {
  Real sq = 0;
  for (const auto& [_, g] : grads) {
    for (Real v : g.data()) sq += v * v;
  }
  return std::sqrt(sq);
}

Real clip_grad_norm(ParamStore& grads, Real max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  const Real norm = global_norm(grads);
  if (norm > max_norm) {
    const Real factor = max_norm / norm;
    for (auto& [_, g] : grads) {
      for (auto& v : g.data_mut()) v *= factor;
    }
  }
  return norm;
}

namespace {

constexpr const char* kMagic = "sml-checkpoint v1";

void write_values(std::ostream& out, std::span<const Real> values) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      ++i;
      out += s[i] == 'n' ? '\n' : s[i];
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out << kMagic << '\n';
  out << "dtype " << kRealName << '\n';
  for (const auto& [key, value] : checkpoint.attributes) {
    if (key.find_first_of(" \n") != std::string::npos) throw std::invalid_argument("checkpoint attribute key with whitespace: " + key);
    out << "attr " << key << ' ' << escape(value) << '\n';
  }
  out << "entries " << checkpoint.params.size() << '\n';
  for (const auto& [name, t] : checkpoint.params) {
    out << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape()) out << ' ' << d;
    out << '\n';
  }
  out << "data\n";
  for (const auto& [_, t] : checkpoint.params) write_values(out, t.data());
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  auto fail = [&](const std::string& why) -> std::runtime_error {
    return std::runtime_error("malformed checkpoint " + path.string() + ": " + why);
  };
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw fail("bad magic line");
  if (!std::getline(in, line) || line != std::string("dtype ") + kRealName) {
    throw fail("dtype line '" + line + "' does not match this build (" + kRealName + ")");
  }
  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> manifest;
  std::size_t expected = 0;
  bool have_count = false;
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "attr") {
      std::string key;
      ls >> key;
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
      ck.attributes[key] = unescape(rest);
    } else if (tag == "entries") {
      ls >> expected;
      have_count = true;
    } else if (tag == "tensor") {
      std::string name;
      std::size_t rank = 0;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (!ls || rank == 0) throw fail("bad tensor line '" + line + "'");
      manifest.emplace_back(name, shape);
    } else {
      throw fail("unexpected line '" + line + "'");
    }
  }
  if (line != "data") throw fail("missing data section");
  if (!have_count || expected != manifest.size()) throw fail("entry count mismatch");
  for (auto& [name, shape] : manifest) {
    std::vector<Real> values(shape_numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(Real)));
    if (!in) throw fail("truncated values for '" + name + "'");
    ck.params.add(name, Tensor(shape, std::move(values), true));
  }
  return ck;
}

}  // namespace sml
