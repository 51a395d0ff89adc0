#include "cactusnet/cactus.hpp"

#include <algorithm>
#include <deque>
#include <fstream>

#include <fmt/format.h>

#include "cactusnet/binary_io.hpp"
#include "cactusnet/checkpoint.hpp"
#include "cactusnet/error.hpp"
#include "cactusnet/rng.hpp"

namespace cnl::cactus {

using nlohmann::json;

Thresholds compute_thresholds(double q, double y1, double y2) {
  for (double v : {q, y1, y2}) {
    if (!(v >= 0.0 && v <= 1.0)) throw RangeError(fmt::format("threshold input {} outside [0,1]", v));
  }
  return {q, y1, y2, q - (q - y1) / 3.0, q - (q - y2) / 3.0};
}

Baselines baseline_from_tables(const app::ApplicabilityTable& table, const std::map<int, data::SubsetLabel>& labels,
                               std::size_t layer, std::size_t final_layer) {
  const auto curves = app::subset_average(table, labels);
  auto mean = [&](data::SubsetLabel s, std::size_t l) {
    auto it = curves.find(s);
    if (it == curves.end() || !it->second.count(l)) {
      throw AggregationError(fmt::format("table has no {} entries at layer {}", data::to_string(s), l));
    }
    return it->second.at(l);
  };
  return {mean(data::SubsetLabel::ObjectiveKnown, layer), mean(data::SubsetLabel::ObjectiveUnknown, layer),
          mean(data::SubsetLabel::NonobjectiveUnknown, final_layer)};
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Known: return "known";
    case Verdict::ObjectiveUnknown: return "objective_unknown";
    case Verdict::NonobjectiveUnknown: return "nonobjective_unknown";
  }
  return "?";
}

Verdict verdict_from_string(std::string_view s) {
  for (auto v : {Verdict::Known, Verdict::ObjectiveUnknown, Verdict::NonobjectiveUnknown}) {
    if (to_string(v) == s) return v;
  }
  throw FormatError(FormatError::Kind::Corrupt, "unknown verdict '" + std::string(s) + "'");
}

Verdict verdict_for(double app, const Thresholds& t) {
  if (app > t.tau1) return Verdict::Known;
  if (app > t.tau2) return Verdict::ObjectiveUnknown;
  return Verdict::NonobjectiveUnknown;
}

double PredictorEstimator::estimate(const Tensor& activation) const {
  return pred::predict_applicability(model_, activation);
}

CactusTree CactusTree::from_trunk(const Network& net, std::span<const std::size_t> taps,
                                  std::vector<std::string> labels, std::size_t decision_depth) {
  if (taps.size() < 2) throw ConfigError("a cactus trunk needs at least two tapped layers");
  const auto head = net.last_dense();
  if (!head) throw UnsupportedArchitecture("trunk has no Dense head");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] >= *head || (i > 0 && taps[i] <= taps[i - 1])) {
      throw ConfigError("taps must be increasing and lie before the final Dense layer");
    }
  }
  if (decision_depth < 1 || decision_depth >= taps.size()) {
    throw ConfigError(fmt::format("decision depth {} must lie in [1, {}]", decision_depth, taps.size() - 1));
  }
  if (labels.size() != net.output_shape().back()) {
    throw ConfigError(fmt::format("{} labels for a {}-way head", labels.size(), net.output_shape().back()));
  }
  CactusTree tree;
  tree.taps_.assign(taps.begin(), taps.end());
  tree.decision_depth_ = decision_depth;
  std::size_t begin = 0;
  for (std::size_t d = 0; d <= taps.size(); ++d) {
    const std::size_t end = d < taps.size() ? taps[d] + 1 : net.layer_count();
    CactusNode n;
    n.branch = 0;
    n.parent = d == 0 ? -1 : static_cast<int>(d) - 1;
    n.depth = d;
    n.block = net.slice(begin, end);
    n.block.unfreeze_all();
    if (d == taps.size()) {
      n.leaf = true;
      n.labels = labels;
    }
    tree.add_node(std::move(n));
    if (d > 0) tree.nodes_[d - 1].children.push_back(static_cast<int>(d));
    begin = end;
  }
  tree.trunk_template_.input_shape = net.input_shape();
  for (const auto& n : tree.nodes_) tree.trunk_template_.blocks.push_back(n.block.layers());
  return tree;
}

int CactusTree::add_node(CactusNode n) {
  n.id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

int CactusTree::trunk_node(std::size_t depth) const {
  if (depth >= depth_count()) throw RangeError(fmt::format("no trunk block at depth {}", depth));
  return static_cast<int>(depth);
}

BranchTemplate CactusTree::trunk_template(std::size_t from_depth) const {
  if (from_depth == 0 || from_depth >= depth_count()) {
    throw RangeError(fmt::format("branch depth {} outside [1, {}]", from_depth, depth_count() - 1));
  }
  BranchTemplate t;
  t.input_shape = node(trunk_node(from_depth)).block.input_shape();
  t.blocks.assign(trunk_template_.blocks.begin() + static_cast<std::ptrdiff_t>(from_depth),
                  trunk_template_.blocks.end());
  return t;
}

std::vector<int> CactusTree::branch_roots(int at_node) const {
  std::vector<int> out;
  const auto& n = node(at_node);
  for (int c : n.children) {
    if (node(c).branch != n.branch) out.push_back(c);
  }
  return out;
}

void CactusTree::set_estimator(int node_id, std::shared_ptr<const ApplicabilityEstimator> estimator, std::string ref) {
  node(node_id).estimator = std::move(estimator);
  node(node_id).predictor_ref = std::move(ref);
}

void CactusTree::set_thresholds(int node_id, const Thresholds& t) { node(node_id).thresholds = t; }

int CactusTree::create_branch(int at_node, const BranchTemplate& tmpl, std::uint64_t seed) {
  const CactusNode& at = node(at_node);
  if (at.leaf) throw ConfigError(fmt::format("cannot branch below leaf node {}", at_node));
  if (tmpl.blocks.empty()) throw ConfigError("branch template has no blocks");
  if (at.block.output_shape() != tmpl.input_shape) {
    throw ShapeError(fmt::format("node {} outputs {} but the branch template expects {}", at_node,
                                 shape_str(at.block.output_shape()), shape_str(tmpl.input_shape)));
  }
  const int branch = next_branch_++;
  int parent = at_node;
  std::size_t depth = at.depth + 1;
  Shape shape = tmpl.input_shape;
  for (std::size_t k = 0; k < tmpl.blocks.size(); ++k, ++depth) {
    CactusNode n;
    n.branch = branch;
    n.parent = parent;
    n.depth = depth;
    n.block = Network::create(shape, tmpl.blocks[k], mix_seed({seed, k}));
    n.provisional = true;
    if (k + 1 == tmpl.blocks.size()) {
      n.leaf = true;
      n.provisional_label = fmt::format("branch-{}", branch);
    }
    shape = n.block.output_shape();
    const int id = add_node(std::move(n));
    nodes_[static_cast<std::size_t>(parent)].children.push_back(id);
    parent = id;
  }
  return branch;
}

int CactusTree::create_branch(int at_node, std::uint64_t seed) {
  if (node(at_node).leaf) throw ConfigError(fmt::format("cannot branch below leaf node {}", at_node));
  return create_branch(at_node, trunk_template(node(at_node).depth + 1), seed);
}

namespace {

json thresholds_json(const std::optional<Thresholds>& t) {
  if (!t) return nullptr;
  return {{"q", t->q}, {"y1", t->y1}, {"y2", t->y2}, {"tau1", t->tau1}, {"tau2", t->tau2}};
}

std::optional<Thresholds> thresholds_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  return Thresholds{j.at("q").get<double>(), j.at("y1").get<double>(), j.at("y2").get<double>(),
                    j.at("tau1").get<double>(), j.at("tau2").get<double>()};
}

}  // namespace

json CactusTree::topology() const {
  json j;
  j["decision_depth"] = decision_depth_;
  j["taps"] = taps_;
  j["next_branch"] = next_branch_;
  j["nodes"] = json::array();
  for (const auto& n : nodes_) {
    json o;
    o["id"] = n.id;
    o["branch"] = n.branch;
    o["parent"] = n.parent;
    o["depth"] = n.depth;
    o["children"] = n.children;
    o["provisional"] = n.provisional;
    o["leaf"] = n.leaf;
    o["labels"] = n.labels;
    o["provisional_label"] = n.provisional_label;
    o["thresholds"] = thresholds_json(n.thresholds);
    o["predictor"] = n.predictor_ref;
    o["absorbed"] = n.absorbed;
    o["architecture"] = architecture_json(n.block);
    j["nodes"].push_back(o);
  }
  return j;
}

void CactusTree::save(const std::filesystem::path& dir) const {
  json j = topology();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const std::string rel = fmt::format("nodes/node_{}.ckpt", i);
    j["nodes"][i]["checkpoint"] = rel;
    save_checkpoint(dir / rel, nodes_[i].block);
  }
  io::write_file_atomic(dir / "tree.json", j.dump(2) + "\n");
}

CactusTree CactusTree::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "tree.json");
  if (!in) throw DataError("cannot open " + (dir / "tree.json").string());
  CactusTree tree;
  try {
    const json j = json::parse(in);
    tree.decision_depth_ = j.at("decision_depth").get<std::size_t>();
    tree.taps_ = j.at("taps").get<std::vector<std::size_t>>();
    tree.next_branch_ = j.at("next_branch").get<int>();
    for (const auto& o : j.at("nodes")) {
      CactusNode n;
      n.id = o.at("id").get<int>();
      n.branch = o.at("branch").get<int>();
      n.parent = o.at("parent").get<int>();
      n.depth = o.at("depth").get<std::size_t>();
      n.children = o.at("children").get<std::vector<int>>();
      n.provisional = o.at("provisional").get<bool>();
      n.leaf = o.at("leaf").get<bool>();
      n.labels = o.at("labels").get<std::vector<std::string>>();
      n.provisional_label = o.at("provisional_label").get<std::string>();
      n.thresholds = thresholds_from_json(o.at("thresholds"));
      n.predictor_ref = o.at("predictor").get<std::string>();
      n.absorbed = o.at("absorbed").get<std::vector<std::size_t>>();
      n.block = load_checkpoint(dir / o.at("checkpoint").get<std::string>()).net;
      if (n.id != static_cast<int>(tree.nodes_.size())) {
        throw FormatError(FormatError::Kind::Corrupt, "tree.json node ids are not sequential");
      }
      tree.nodes_.push_back(std::move(n));
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, (dir / "tree.json").string() + ": " + e.what());
  }
  if (tree.nodes_.empty()) throw FormatError(FormatError::Kind::Corrupt, "tree.json has no nodes");
  tree.trunk_template_.input_shape = tree.nodes_[0].block.input_shape();
  for (int id = 0; id >= 0;) {
    const auto& n = tree.node(id);
    tree.trunk_template_.blocks.push_back(n.block.layers());
    id = -1;
    for (int c : n.children) {
      if (tree.node(c).branch == 0) id = c;
    }
  }
  return tree;
}

std::optional<std::size_t> route_step(std::span<const Candidate> candidates) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!(c.app > c.tau2)) continue;
    if (!best || c.app > candidates[*best].app ||
        (c.app == candidates[*best].app && c.branch < candidates[*best].branch)) {
      best = i;
    }
  }
  return best;
}

std::optional<int> route_step(const CactusTree& tree, int node, std::span<const double> predicted) {
  const auto& children = tree.node(node).children;
  if (children.size() != predicted.size()) {
    throw ConfigError(fmt::format("node {} has {} children but {} predictions", node, children.size(),
                                  predicted.size()));
  }
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < children.size(); ++i) {
    const auto& c = tree.node(children[i]);
    if (!c.thresholds) throw ConfigError(fmt::format("node {} has no thresholds", c.id));
    cands.push_back({c.branch, predicted[i], c.thresholds->tau2});
  }
  const auto pick = route_step(cands);
  if (!pick) return std::nullopt;
  return children[*pick];
}

RouteDecision classify_or_flag(const CactusTree& tree, const Tensor& image, const AppOverride& override) {
  RouteDecision d;
  const CactusNode& root = tree.node(tree.root());
  Shape batch_shape{1};
  batch_shape.insert(batch_shape.end(), image.shape().begin(), image.shape().end());
  Tensor act = predict(root.block, image.reshaped(batch_shape));
  int cur = root.id;
  d.path.push_back(cur);

  for (std::size_t depth = 1;; ++depth) {
    const CactusNode& n = tree.node(cur);
    if (n.leaf) {
      const auto idx = static_cast<std::size_t>(argmax_rows(act).at(0));
      d.label = idx < n.labels.size() ? n.labels[idx] : n.provisional_label;
      return d;
    }
    std::vector<int> ids;
    for (int c : n.children) {
      if (!tree.node(c).provisional) ids.push_back(c);
    }
    if (ids.empty()) throw ConfigError(fmt::format("node {} has no trained child to route into", cur));

    if (tree.node(ids[0]).leaf) {
      cur = ids[0];
      act = predict(tree.node(cur).block, act);
      d.path.push_back(cur);
      continue;
    }

    std::vector<Candidate> cands;
    std::vector<Tensor> outs;
    for (int c : ids) {
      const CactusNode& child = tree.node(c);
      Tensor out = predict(child.block, act);
      std::optional<double> app = override ? override(child) : std::nullopt;
      if (!app) {
        if (!child.estimator) throw ConfigError(fmt::format("node {} on the routing path has no trained predictor", c));
        app = child.estimator->estimate(out.reshaped(out.sample_shape()));
      }
      if (!child.thresholds) throw ConfigError(fmt::format("node {} on the routing path has no thresholds", c));
      cands.push_back({child.branch, *app, child.thresholds->tau2});
      outs.push_back(std::move(out));
    }
    auto pick = route_step(cands);
    std::size_t best = 0;
    for (std::size_t i = 1; i < cands.size(); ++i) {
      if (cands[i].app > cands[best].app || (cands[i].app == cands[best].app && cands[i].branch < cands[best].branch)) {
        best = i;
      }
    }
    d.apps.push_back({depth, ids[best], cands[best].app});

    if (depth == tree.decision_depth()) {
      d.verdict = verdict_for(cands[best].app, *tree.node(ids[best]).thresholds);
      d.decision_node = cur;
      if (d.verdict == Verdict::ObjectiveUnknown) d.label = fmt::format("new@{}", cur);
      if (d.verdict != Verdict::Known) return d;
    }
    const std::size_t chosen = pick ? *pick : best;
    cur = ids[chosen];
    act = std::move(outs[chosen]);
    d.path.push_back(cur);
  }
}

GrowthLog grow(CactusTree& tree, std::span<const StreamItem> stream, const GrowthConfig& cfg) {
  if (cfg.window == 0) throw ConfigError("consolidation window must be >= 1");
  GrowthLog log;
  std::deque<int> recent;  // branch per below-threshold input, -1 when unrouted
  for (std::size_t i = 0; i < stream.size(); ++i) {
    RouteDecision d = classify_or_flag(tree, stream[i].image, stream[i].override);
    d.index = i;
    if (d.verdict == Verdict::NonobjectiveUnknown) {
      std::optional<int> target;
      for (int r : tree.branch_roots(d.decision_node)) {
        const auto& root = tree.node(r);
        if (!root.provisional) continue;
        if (std::find(recent.begin(), recent.end(), root.branch) != recent.end() &&
            (!target || root.branch < tree.node(*target).branch)) {
          target = r;
        }
      }
      if (!target && tree.branch_roots(d.decision_node).size() < cfg.max_branches_per_node) {
        d.branch_seed = mix_seed({cfg.seed, static_cast<std::uint64_t>(tree.branch_count())});
        const int b = tree.create_branch(d.decision_node, d.branch_seed);
        d.branch_created = b;
        target = tree.node(d.decision_node).children.back();
        ++log.branches_created;
      }
      if (target) {
        tree.node(*target).absorbed.push_back(i);
        d.branch = tree.node(*target).branch;
        d.label = tree.node(tree.node(*target).id).provisional_label;
        for (int id = *target; !tree.node(id).leaf; id = tree.node(id).children.front()) {
          d.label = tree.node(tree.node(id).children.front()).provisional_label;
        }
      } else {
        d.unrouted = true;
        ++log.unrouted;
      }
      recent.push_back(d.branch.value_or(-1));
      if (recent.size() > cfg.window) recent.pop_front();
    }
    log.decisions.push_back(std::move(d));
  }
  return log;
}

void replay(CactusTree& tree, const GrowthLog& log) {
  for (const auto& d : log.decisions) {
    if (d.branch_created) {
      const int b = tree.create_branch(d.decision_node, d.branch_seed);
      if (b != *d.branch_created) {
        throw FormatError(FormatError::Kind::Corrupt,
                          fmt::format("replay created branch {} where the log recorded {}", b, *d.branch_created));
      }
    }
    if (d.branch) {
      bool found = false;
      for (int r : tree.branch_roots(d.decision_node)) {
        if (tree.node(r).branch == *d.branch) {
          tree.node(r).absorbed.push_back(d.index);
          found = true;
        }
      }
      if (!found) {
        throw FormatError(FormatError::Kind::Corrupt,
                          fmt::format("log assigns input {} to unknown branch {}", d.index, *d.branch));
      }
    }
  }
}

json decision_json(const RouteDecision& d) {
  json j;
  j["index"] = d.index;
  j["verdict"] = to_string(d.verdict);
  j["label"] = d.label;
  j["path"] = d.path;
  j["apps"] = json::array();
  for (const auto& a : d.apps) j["apps"].push_back({{"depth", a.depth}, {"node", a.node}, {"app", a.app}});
  j["decision_node"] = d.decision_node;
  j["branch"] = d.branch ? json(*d.branch) : json(nullptr);
  j["branch_created"] = d.branch_created ? json(*d.branch_created) : json(nullptr);
  j["branch_seed"] = d.branch_seed;
  j["unrouted"] = d.unrouted;
  return j;
}

RouteDecision decision_from_json(const json& j) {
  RouteDecision d;
  try {
    d.index = j.at("index").get<std::size_t>();
    d.verdict = verdict_from_string(j.at("verdict").get<std::string>());
    d.label = j.at("label").get<std::string>();
    d.path = j.at("path").get<std::vector<int>>();
    for (const auto& a : j.at("apps")) {
      d.apps.push_back({a.at("depth").get<std::size_t>(), a.at("node").get<int>(), a.at("app").get<double>()});
    }
    d.decision_node = j.at("decision_node").get<int>();
    if (!j.at("branch").is_null()) d.branch = j.at("branch").get<int>();
    if (!j.at("branch_created").is_null()) d.branch_created = j.at("branch_created").get<int>();
    d.branch_seed = j.at("branch_seed").get<std::uint64_t>();
    d.unrouted = j.at("unrouted").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, std::string("malformed route decision: ") + e.what());
  }
  return d;
}

void write_growth_log(const std::filesystem::path& path, const GrowthLog& log) {
  std::string out;
  for (const auto& d : log.decisions) out += decision_json(d).dump() + "\n";
  io::write_file_atomic(path, out);
}

GrowthLog read_growth_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  GrowthLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(FormatError::Kind::Corrupt, path.string() + ": " + e.what());
    }
    auto d = decision_from_json(j);
    log.branches_created += d.branch_created.has_value();
    log.unrouted += d.unrouted;
    log.decisions.push_back(std::move(d));
  }
  return log;
}

}  // namespace cnl::cactus
