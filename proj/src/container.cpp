#include "latentseg/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "latentseg/errors.hpp"

namespace latentseg {

namespace {

constexpr const char* kMagic = "LATENTSEG-CONTAINER 1";

void put_f32_le(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

void Container::set(const std::string& key, const std::string& value) {
  if (key.find_first_of(" \n=") != std::string::npos || value.find('\n') != std::string::npos) {
    throw IoError("container: invalid header entry '" + key + "'");
  }
  for (auto& [k, v] : header) {
    if (k == key) {
      v = value;
      return;
    }
  }
  header.emplace_back(key, value);
}

bool Container::has(const std::string& key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return true;
  }
  return false;
}

const std::string& Container::get(const std::string& key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return v;
  }
  throw IoError("container: missing header key '" + key + "'");
}

const NamedArray* Container::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const NamedArray& Container::array(const std::string& name) const {
  if (const auto* a = find(name)) return *a;
  throw IoError("container: missing array '" + name + "'");
}

void Container::add_array(std::string name, std::vector<int> shape, std::vector<float> values) {
  if (nn::numel(shape) != values.size()) throw IoError("container: array '" + name + "' shape/size mismatch");
  arrays.push_back({std::move(name), std::move(shape), std::move(values)});
}

void write_container(const std::string& path, const Container& container) {
  std::string out = std::string(kMagic) + "\n";
  for (const auto& [k, v] : container.header) out += k + " = " + v + "\n";
  for (const auto& a : container.arrays) {
    out += "array " + a.name + " " + std::to_string(a.shape.size());
    for (int d : a.shape) out += " " + std::to_string(d);
    out += "\n";
  }
  out += "end\n";
  for (const auto& a : container.arrays) {
    for (float v : a.values) put_f32_le(out, v);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write container: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read container: " + path);
  std::string line;
  std::getline(f, line);
  if (line != kMagic) throw IoError("not a latentseg container (bad magic): " + path);
  Container c;
  while (true) {
    if (!std::getline(f, line)) throw IoError("truncated container header: " + path);
    if (line == "end") break;
    if (line.rfind("array ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      NamedArray a;
      std::size_t rank = 0;
      ls >> a.name >> rank;
      a.shape.resize(rank);
      for (auto& d : a.shape) ls >> d;
      if (!ls) throw IoError("malformed array descriptor in " + path + ": " + line);
      c.arrays.push_back(std::move(a));
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw IoError("malformed header line in " + path + ": " + line);
    c.header.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  for (auto& a : c.arrays) {
    const std::size_t n = nn::numel(a.shape);
    std::string bytes(n * 4, '\0');
    f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(f.gcount()) != bytes.size()) throw IoError("truncated payload in " + path);
    a.values.resize(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < n; ++i) a.values[i] = get_f32_le(p + 4 * i);
  }
  return c;
}

template <typename Real>
void store_params(Container& container, const nn::ParamList<Real>& params, const std::string& prefix) {
  for (const auto& p : params) {
    std::vector<float> values(p.var.value().begin(), p.var.value().end());
    container.add_array(prefix + p.name, p.var.shape(), std::move(values));
  }
}

template <typename Real>
void load_params(const Container& container, const nn::ParamList<Real>& params, const std::string& prefix) {
  for (const auto& p : params) {
    const NamedArray& a = container.array(prefix + p.name);
    if (a.shape != p.var.shape()) {
      throw IoError("container: array '" + p.name + "' has shape " + nn::shape_str(a.shape) + ", expected " +
                    nn::shape_str(p.var.shape()));
    }
    nn::Var<Real> v = p.var;
    auto dst = v.mutable_value();
    for (std::size_t i = 0; i < a.values.size(); ++i) dst[i] = Real(a.values[i]);
  }
}

template void store_params(Container&, const nn::ParamList<float>&, const std::string&);
template void store_params(Container&, const nn::ParamList<double>&, const std::string&);
template void load_params(const Container&, const nn::ParamList<float>&, const std::string&);
template void load_params(const Container&, const nn::ParamList<double>&, const std::string&);

}  // namespace latentseg
