#pragma once

// Discrete architecture vocabulary: operation kinds, cells, genotypes, the
// `.geno` text format and the network layer planner.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pibnas {

enum class OpKind : std::uint8_t {
  none,
  skip_connect,
  pib_conv_3x3,
  pib_conv_5x5,
  pib_conv_7x7,
  dil_conv_3x3,
  dil_conv_5x5,
  conv_7x1_1x7,
  max_pool_3x3,
  avg_pool_3x3,
  // Legacy kinds: baseline and ablation networks only.
  sep_conv_3x3,
  sep_conv_5x5,
  convnext_conv_7x7,
};

inline constexpr int kNumOpKinds = 13;

std::string_view op_name(OpKind op);

/// Resolves a canonical name or alias (e.g. "dialated_conv_3x3"), case-insensitive.
std::optional<OpKind> op_from_name(std::string_view name);

/// The ten-operation search set, in canonical order.
std::span<const OpKind> search_ops();

std::span<const OpKind> all_ops();

bool is_legacy(OpKind op);

/// Depthwise kernel size of a conv kind, 0 for parameter-free kinds.
int op_kernel(OpKind op);

enum class CellType : std::uint8_t { normal, reduce };

std::string_view cell_type_name(CellType t);

inline constexpr int kCellNodes = 4;
inline constexpr int kEdgesPerNode = 2;
/// Candidate edges in a supernet cell: 2 + 3 + 4 + 5.
inline constexpr int kCandidateEdges = 14;

struct Edge {
  OpKind op = OpKind::skip_connect;
  int source = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

struct CellSpec {
  /// nodes[i] feeds derived node i + 2.
  std::array<std::array<Edge, kEdgesPerNode>, kCellNodes> nodes{};
  std::set<int> concat{2, 3, 4, 5};

  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

struct Genotype {
  CellSpec normal;
  CellSpec reduce;

  const CellSpec& cell(CellType t) const { return t == CellType::normal ? normal : reduce; }
  CellSpec& cell(CellType t) { return t == CellType::normal ? normal : reduce; }

  friend bool operator==(const Genotype&, const Genotype&) = default;
};

struct Violation {
  CellType cell;
  int node;  // derived node index (2..5), or -1 for cell-level rules
  std::string rule;

  std::string to_string() const;
};

class GenotypeParseError : public std::runtime_error {
 public:
  GenotypeParseError(std::size_t position, const std::string& what);
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class GenotypeValidationError : public std::runtime_error {
 public:
  explicit GenotypeValidationError(std::vector<Violation> violations);
  const std::vector<Violation>& violations() const noexcept { return violations_; }

 private:
  std::vector<Violation> violations_;
};

/// Parses the DSL without structural validation (syntax and counts only).
Genotype parse_genotype_unchecked(std::string_view text);

/// Parses and validates; throws GenotypeParseError or GenotypeValidationError.
Genotype parse_genotype(std::string_view text);

std::string serialize_genotype(const Genotype& g);

std::vector<Violation> validate_genotype(const Genotype& g);

Genotype load_genotype_file(const std::filesystem::path& path);
void save_genotype_file(const std::filesystem::path& path, const Genotype& g);

struct NetworkPlan {
  int layers = 1;
  int c_init = 16;
  int num_classes = 10;
  int input_hw = 32;
  std::vector<int> reduction_indices;
  std::optional<int> aux_index;
  /// Cell channel count per layer (doubles at each reduction).
  std::vector<int> channels;

  bool is_reduction(int layer) const;
};

NetworkPlan plan_network(int layers, int c_init, int num_classes, int input_hw, bool aux);

}  // namespace pibnas
