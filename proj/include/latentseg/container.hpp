#pragma once

// Versioned checkpoint container: a text header of `key = value` lines and
// array descriptors, terminated by `end`, followed by the arrays as
// little-endian 32-bit floats in descriptor order.
//
//   LATENTSEG-CONTAINER 1
//   kind = codec
//   downsample_factor = 8
//   array encoder.conv_in.weight 4 16 3 3 3
//   ...
//   end
//   <payload>

#include <string>
#include <utility>
#include <vector>

#include "latentseg/nn.hpp"

namespace latentseg {

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct Container {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<NamedArray> arrays;

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  // Throws IoError when missing.
  const std::string& get(const std::string& key) const;
  const NamedArray* find(const std::string& name) const;
  const NamedArray& array(const std::string& name) const;

  void add_array(std::string name, std::vector<int> shape, std::vector<float> values);
};

void write_container(const std::string& path, const Container& container);
Container read_container(const std::string& path);

// Moves named parameters into/out of a container, array names prefixed.
// Loading checks shapes.
template <typename Real>
void store_params(Container& container, const nn::ParamList<Real>& params, const std::string& prefix = "");
template <typename Real>
void load_params(const Container& container, const nn::ParamList<Real>& params, const std::string& prefix = "");

}  // namespace latentseg
