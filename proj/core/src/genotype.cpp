#include "pibnas/genotype.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace pibnas {

namespace {

struct OpEntry {
  OpKind kind;
  std::string_view name;
};

constexpr std::array<OpEntry, kNumOpKinds> kOps{{
    {OpKind::none, "none"},
    {OpKind::skip_connect, "skip_connect"},
    {OpKind::pib_conv_3x3, "pib_conv_3x3"},
    {OpKind::pib_conv_5x5, "pib_conv_5x5"},
    {OpKind::pib_conv_7x7, "pib_conv_7x7"},
    {OpKind::dil_conv_3x3, "dil_conv_3x3"},
    {OpKind::dil_conv_5x5, "dil_conv_5x5"},
    {OpKind::conv_7x1_1x7, "conv_7x1_1x7"},
    {OpKind::max_pool_3x3, "max_pool_3x3"},
    {OpKind::avg_pool_3x3, "avg_pool_3x3"},
    {OpKind::sep_conv_3x3, "sep_conv_3x3"},
    {OpKind::sep_conv_5x5, "sep_conv_5x5"},
    {OpKind::convnext_conv_7x7, "convnext_conv_7x7"},
}};

constexpr std::array<OpEntry, 2> kAliases{{
    {OpKind::dil_conv_3x3, "dialated_conv_3x3"},
    {OpKind::dil_conv_5x5, "dialated_conv_5x5"},
}};

constexpr std::array<OpKind, 10> kSearchOps{
    OpKind::none,         OpKind::skip_connect, OpKind::pib_conv_3x3, OpKind::pib_conv_5x5,
    OpKind::pib_conv_7x7, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5, OpKind::conv_7x1_1x7,
    OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
};

constexpr std::array<OpKind, kNumOpKinds> kAllOps = [] {
  std::array<OpKind, kNumOpKinds> out{};
  for (std::size_t i = 0; i < kOps.size(); ++i) out[i] = kOps[i].kind;
  return out;
}();

// Tokenizer for the genotype DSL. Tokens carry byte offsets for error reports.
enum class Tok { ident, number, lparen, rparen, comma, bar, colon, semicolon, end };

struct Token {
  Tok kind;
  std::string text;
  std::size_t pos;
};

std::string_view tok_label(Tok t) {
  switch (t) {
    case Tok::ident: return "identifier";
    case Tok::number: return "number";
    case Tok::lparen: return "'('";
    case Tok::rparen: return "')'";
    case Tok::comma: return "','";
    case Tok::bar: return "'|'";
    case Tok::colon: return "':'";
    case Tok::semicolon: return "';'";
    case Tok::end: return "end of input";
  }
  return "?";
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char ch = static_cast<unsigned char>(text[i]);
    if (std::isspace(ch)) {
      ++i;
      continue;
    }
    if (ch == '#') {  // comment to end of line
      while (i < text.size() && text[i] != '\n') ++i;
      continue;
    }
    const std::size_t start = i;
    auto single = [&](Tok t) {
      out.push_back({t, std::string(1, text[i]), start});
      ++i;
    };
    switch (ch) {
      case '(': single(Tok::lparen); continue;
      case ')': single(Tok::rparen); continue;
      case ',': single(Tok::comma); continue;
      case '|': single(Tok::bar); continue;
      case ':': single(Tok::colon); continue;
      case ';': single(Tok::semicolon); continue;
      default: break;
    }
    if (std::isdigit(ch)) {
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
      out.push_back({Tok::number, std::string(text.substr(start, i - start)), start});
      continue;
    }
    if (std::isalpha(ch) || ch == '_') {
      while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        if (!(std::isalnum(c) || c == '_')) break;
        ++i;
      }
      std::string word(text.substr(start, i - start));
      std::transform(word.begin(), word.end(), word.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      out.push_back({Tok::ident, std::move(word), start});
      continue;
    }
    throw GenotypeParseError(start, fmt::format("unexpected character '{}'", text[i]));
  }
  out.push_back({Tok::end, "", text.size()});
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : toks_(tokenize(text)) {}

  Genotype parse() {
    Genotype g;
    section("normal");
    g.normal.nodes = cell_edges("normal");
    g.normal.concat = optional_concat();
    if (!accept(Tok::semicolon) && peek().kind != Tok::ident) {
      expect(Tok::semicolon);
    }
    section("reduce");
    g.reduce.nodes = cell_edges("reduce");
    g.reduce.concat = optional_concat();
    accept(Tok::semicolon);
    if (peek().kind != Tok::end) fail(peek(), "trailing input after reduce cell");
    return g;
  }

 private:
  const Token& peek() const { return toks_[i_]; }

  bool accept(Tok t) {
    if (peek().kind == t) {
      ++i_;
      return true;
    }
    return false;
  }

  const Token& expect(Tok t) {
    if (peek().kind != t) {
      fail(peek(), fmt::format("expected {}, found {}", tok_label(t), describe(peek())));
    }
    return toks_[i_++];
  }

  [[noreturn]] static void fail(const Token& t, const std::string& msg) {
    throw GenotypeParseError(t.pos, msg);
  }

  static std::string describe(const Token& t) {
    if (t.kind == Tok::ident || t.kind == Tok::number) return fmt::format("'{}'", t.text);
    return std::string(tok_label(t.kind));
  }

  void section(std::string_view name) {
    const Token& t = expect(Tok::ident);
    if (t.text != name) fail(t, fmt::format("expected section '{}', found '{}'", name, t.text));
    expect(Tok::colon);
  }

  int number() {
    const Token& t = expect(Tok::number);
    if (t.text.size() > 6) fail(t, "index out of range");
    return std::stoi(t.text);
  }

  Edge edge() {
    expect(Tok::lparen);
    const Token& name = expect(Tok::ident);
    const auto op = op_from_name(name.text);
    if (!op) fail(name, fmt::format("unknown operation '{}'", name.text));
    expect(Tok::comma);
    const int src = number();
    expect(Tok::rparen);
    return Edge{*op, src};
  }

  std::array<std::array<Edge, kEdgesPerNode>, kCellNodes> cell_edges(std::string_view cell) {
    std::array<std::array<Edge, kEdgesPerNode>, kCellNodes> nodes{};
    int node = 0;
    while (true) {
      const Token& first = peek();
      std::vector<Edge> edges;
      while (peek().kind == Tok::lparen) edges.push_back(edge());
      if (static_cast<int>(edges.size()) != kEdgesPerNode) {
        fail(first, fmt::format("{} cell node {} has {} edges, expected {}", cell, node + 2,
                                edges.size(), kEdgesPerNode));
      }
      if (node >= kCellNodes) {
        fail(first, fmt::format("{} cell has more than {} nodes", cell, kCellNodes));
      }
      nodes[node] = {edges[0], edges[1]};
      ++node;
      if (!accept(Tok::bar)) break;
    }
    if (node != kCellNodes) {
      fail(peek(), fmt::format("{} cell has {} nodes, expected {}", cell, node, kCellNodes));
    }
    return nodes;
  }

  std::set<int> optional_concat() {
    // "; concat: ..." may be omitted, in which case the default applies.
    if (peek().kind != Tok::semicolon) return {2, 3, 4, 5};
    const std::size_t save = i_;
    ++i_;
    if (peek().kind != Tok::ident || peek().text != "concat") {
      i_ = save;
      return {2, 3, 4, 5};
    }
    ++i_;
    expect(Tok::colon);
    std::set<int> out;
    while (peek().kind == Tok::number) {
      const Token& t = peek();
      if (!out.insert(number()).second) fail(t, "duplicate concat index");
    }
    return out;
  }

  std::vector<Token> toks_;
  std::size_t i_ = 0;
};

void write_cell(std::string& out, std::string_view name, const CellSpec& cell) {
  out += name;
  out += ':';
  for (int n = 0; n < kCellNodes; ++n) {
    if (n > 0) out += " |";
    for (const Edge& e : cell.nodes[n]) {
      out += fmt::format(" ({},{})", op_name(e.op), e.source);
    }
  }
  out += " ; concat:";
  for (int c : cell.concat) out += fmt::format(" {}", c);
}

}  // namespace

std::string_view op_name(OpKind op) { return kOps[static_cast<std::size_t>(op)].name; }

std::optional<OpKind> op_from_name(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (const auto& e : kOps) {
    if (e.name == lower) return e.kind;
  }
  for (const auto& e : kAliases) {
    if (e.name == lower) return e.kind;
  }
  return std::nullopt;
}

std::span<const OpKind> search_ops() { return kSearchOps; }
std::span<const OpKind> all_ops() { return kAllOps; }

bool is_legacy(OpKind op) {
  return op == OpKind::sep_conv_3x3 || op == OpKind::sep_conv_5x5 ||
         op == OpKind::convnext_conv_7x7;
}

int op_kernel(OpKind op) {
  switch (op) {
    case OpKind::pib_conv_3x3:
    case OpKind::dil_conv_3x3:
    case OpKind::sep_conv_3x3:
    case OpKind::max_pool_3x3:
    case OpKind::avg_pool_3x3: return 3;
    case OpKind::pib_conv_5x5:
    case OpKind::dil_conv_5x5:
    case OpKind::sep_conv_5x5: return 5;
    case OpKind::pib_conv_7x7:
    case OpKind::convnext_conv_7x7:
    case OpKind::conv_7x1_1x7: return 7;
    case OpKind::none:
    case OpKind::skip_connect: return 0;
  }
  return 0;
}

std::string_view cell_type_name(CellType t) { return t == CellType::normal ? "normal" : "reduce"; }

std::string Violation::to_string() const {
  if (node < 0) return fmt::format("{} cell: {}", cell_type_name(cell), rule);
  return fmt::format("{} cell, node {}: {}", cell_type_name(cell), node, rule);
}

GenotypeParseError::GenotypeParseError(std::size_t position, const std::string& what)
    : std::runtime_error(fmt::format("genotype syntax error at offset {}: {}", position, what)),
      position_(position) {}

namespace {
std::string join_violations(const std::vector<Violation>& v) {
  std::string out = "invalid genotype:";
  for (const auto& x : v) out += "\n  " + x.to_string();
  return out;
}
}  // namespace

GenotypeValidationError::GenotypeValidationError(std::vector<Violation> violations)
    : std::runtime_error(join_violations(violations)), violations_(std::move(violations)) {}

Genotype parse_genotype_unchecked(std::string_view text) { return Parser(text).parse(); }

Genotype parse_genotype(std::string_view text) {
  Genotype g = parse_genotype_unchecked(text);
  auto violations = validate_genotype(g);
  if (!violations.empty()) throw GenotypeValidationError(std::move(violations));
  return g;
}

std::string serialize_genotype(const Genotype& g) {
  std::string out;
  write_cell(out, "normal", g.normal);
  out += " ;\n";
  write_cell(out, "reduce", g.reduce);
  out += '\n';
  return out;
}

std::vector<Violation> validate_genotype(const Genotype& g) {
  std::vector<Violation> out;
  for (CellType t : {CellType::normal, CellType::reduce}) {
    const CellSpec& cell = g.cell(t);
    for (int n = 0; n < kCellNodes; ++n) {
      const int node = n + 2;
      for (const Edge& e : cell.nodes[n]) {
        if (e.source < 0 || e.source >= node) {
          out.push_back({t, node,
                         fmt::format("edge source {} must be in [0, {})", e.source, node)});
        }
        if (static_cast<int>(e.op) >= kNumOpKinds) {
          out.push_back({t, node, "unknown operation kind"});
        }
      }
    }
    if (cell.concat.empty()) out.push_back({t, -1, "concat set is empty"});
    for (int c : cell.concat) {
      if (c < 2 || c >= 2 + kCellNodes) {
        out.push_back({t, -1, fmt::format("concat index {} is not a derived node (2..5)", c)});
      }
    }
  }
  return out;
}

Genotype load_genotype_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open genotype file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_genotype(ss.str());
}

void save_genotype_file(const std::filesystem::path& path, const Genotype& g) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write genotype file: " + path.string());
  out << serialize_genotype(g);
  if (!out) throw std::runtime_error("failed writing genotype file: " + path.string());
}

bool NetworkPlan::is_reduction(int layer) const {
  return std::find(reduction_indices.begin(), reduction_indices.end(), layer) !=
         reduction_indices.end();
}

NetworkPlan plan_network(int layers, int c_init, int num_classes, int input_hw, bool aux) {
  if (layers < 1) throw std::invalid_argument("plan_network: layers must be >= 1");
  if (c_init < 1) throw std::invalid_argument("plan_network: c_init must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("plan_network: num_classes must be >= 1");
  if (input_hw < 1) throw std::invalid_argument("plan_network: input_hw must be >= 1");
  if (aux && layers < 3) {
    throw std::invalid_argument("plan_network: auxiliary head needs layers >= 3");
  }
  NetworkPlan plan;
  plan.layers = layers;
  plan.c_init = c_init;
  plan.num_classes = num_classes;
  plan.input_hw = input_hw;
  if (layers >= 3) plan.reduction_indices = {layers / 3, 2 * layers / 3};
  if (aux) plan.aux_index = 2 * layers / 3;
  int c = c_init;
  for (int i = 0; i < layers; ++i) {
    if (plan.is_reduction(i)) c *= 2;
    plan.channels.push_back(c);
  }
  return plan;
}

}  // namespace pibnas
