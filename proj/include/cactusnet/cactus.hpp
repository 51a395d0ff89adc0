#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cactusnet/applicability.hpp"
#include "cactusnet/nn.hpp"
#include "cactusnet/predictor.hpp"

namespace cnl::cactus {

struct Thresholds {
  double q = 0.0, y1 = 0.0, y2 = 0.0;
  double tau1 = 0.0, tau2 = 0.0;
};

// tau_n = q - (q - y_n) / 3. Inputs must lie in [0,1].
Thresholds compute_thresholds(double q, double y1, double y2);

struct Baselines {
  double q = 0.0, y1 = 0.0, y2 = 0.0;
};

// q: objective-known mean at `layer`; y1: objective-unknown mean at `layer`;
// y2: nonobjective-unknown mean at `final_layer`.
Baselines baseline_from_tables(const app::ApplicabilityTable& table, const std::map<int, data::SubsetLabel>& labels,
                               std::size_t layer, std::size_t final_layer);

enum class Verdict { Known, ObjectiveUnknown, NonobjectiveUnknown };

std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view s);

// Known above tau1, objective-unknown above tau2, else nonobjective-unknown; both comparisons strict.
Verdict verdict_for(double app, const Thresholds& t);

class ApplicabilityEstimator {
 public:
  virtual ~ApplicabilityEstimator() = default;
  virtual double estimate(const Tensor& activation) const = 0;
};

class PredictorEstimator : public ApplicabilityEstimator {
 public:
  explicit PredictorEstimator(pred::PredictorModel model) : model_(std::move(model)) {}
  double estimate(const Tensor& activation) const override;
  const pred::PredictorModel& model() const { return model_; }

 private:
  pred::PredictorModel model_;
};

// Returns the same value for every activation.
class ConstantEstimator : public ApplicabilityEstimator {
 public:
  explicit ConstantEstimator(double app) : app_(app) {}
  double estimate(const Tensor&) const override { return app_; }

 private:
  double app_;
};

struct CactusNode {
  int id = 0;
  int branch = 0;  // 0 is the trunk
  int parent = -1;
  std::size_t depth = 0;
  Network block;
  std::vector<int> children;
  bool provisional = false;

  // Tapped blocks carry a predictor and thresholds.
  std::optional<Thresholds> thresholds;
  std::shared_ptr<const ApplicabilityEstimator> estimator;
  std::string predictor_ref;

  // Leaf head: known labels in output order, or a provisional label.
  bool leaf = false;
  std::vector<std::string> labels;
  std::string provisional_label;

  // Stream indices of the inputs this branch root has absorbed.
  std::vector<std::size_t> absorbed;
};

// Layer specs of the blocks below some depth, with the input shape of the
// first one.
struct BranchTemplate {
  Shape input_shape;
  std::vector<std::vector<LayerSpec>> blocks;  // last one is the head block
};

class CactusTree {
 public:
  CactusTree() = default;

  // Splits a trained network into blocks ending at each tap layer plus a
  // head block. Block d (d >= 1) is a routing depth.
  static CactusTree from_trunk(const Network& net, std::span<const std::size_t> taps,
                               std::vector<std::string> labels, std::size_t decision_depth);

  const CactusNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  CactusNode& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const std::vector<CactusNode>& nodes() const { return nodes_; }
  int root() const { return 0; }
  std::size_t decision_depth() const { return decision_depth_; }
  std::size_t depth_count() const { return trunk_template_.blocks.size(); }
  const std::vector<std::size_t>& taps() const { return taps_; }
  int branch_count() const { return next_branch_; }
  std::vector<int> branch_roots(int at_node) const;

  // Trunk node at depth d.
  int trunk_node(std::size_t depth) const;
  BranchTemplate trunk_template(std::size_t from_depth) const;

  void set_estimator(int node_id, std::shared_ptr<const ApplicabilityEstimator> estimator, std::string ref = {});
  void set_thresholds(int node_id, const Thresholds& t);

  // Adds a provisional subtree below at_node built from the template with
  // fresh parameters. Returns the new branch id.
  int create_branch(int at_node, const BranchTemplate& tmpl, std::uint64_t seed);
  int create_branch(int at_node, std::uint64_t seed);

  // Topology without parameters: ids, branches, depths, thresholds, labels.
  nlohmann::json topology() const;

  // tree.json plus one checkpoint per node under dir/nodes.
  void save(const std::filesystem::path& dir) const;
  static CactusTree load(const std::filesystem::path& dir);

 private:
  int add_node(CactusNode n);

  std::vector<CactusNode> nodes_;
  std::vector<std::size_t> taps_;
  std::size_t decision_depth_ = 1;
  int next_branch_ = 1;
  BranchTemplate trunk_template_;
};

struct Candidate {
  int branch = 0;
  double app = 0.0;
  double tau2 = 0.0;
};

// Index of the maximum-App candidate among those with app > tau2, ties to the
// lowest branch id; nullopt means a branch is needed.
std::optional<std::size_t> route_step(std::span<const Candidate> candidates);

// Node-level form: one prediction per child of node, in child order.
std::optional<int> route_step(const CactusTree& tree, int node, std::span<const double> predicted);

struct DepthApp {
  std::size_t depth = 0;
  int node = 0;
  double app = 0.0;
};

struct RouteDecision {
  Verdict verdict = Verdict::Known;
  std::string label;  // leaf argmax label or provisional label
  std::vector<int> path;
  std::vector<DepthApp> apps;
  int decision_node = -1;  // parent of the decision depth
  std::optional<int> branch;          // branch the input was assigned to
  std::optional<int> branch_created;  // set when this input founded it
  std::uint64_t branch_seed = 0;
  bool unrouted = false;
  std::size_t index = 0;  // position in the stream
};

// Per-node App override; returning nullopt falls back to the node's estimator.
using AppOverride = std::function<std::optional<double>(const CactusNode& node)>;

// Descends from the root. The three-way verdict is rendered at the tree's
// decision depth; every other depth only selects the best child.
RouteDecision classify_or_flag(const CactusTree& tree, const Tensor& image, const AppOverride& override = {});

struct GrowthConfig {
  std::size_t max_branches_per_node = 8;
  // A provisional branch stays open while it has absorbed one of the last
  // `window` below-threshold inputs.
  std::size_t window = 25;
  std::uint64_t seed = 0;
};

struct GrowthLog {
  std::vector<RouteDecision> decisions;
  std::size_t branches_created = 0;
  std::size_t unrouted = 0;
};

struct StreamItem {
  Tensor image;
  AppOverride override;
};

GrowthLog grow(CactusTree& tree, std::span<const StreamItem> stream, const GrowthConfig& cfg);

// Re-applies the branch events and absorptions of a log.
void replay(CactusTree& tree, const GrowthLog& log);

nlohmann::json decision_json(const RouteDecision& d);
RouteDecision decision_from_json(const nlohmann::json& j);
void write_growth_log(const std::filesystem::path& path, const GrowthLog& log);
GrowthLog read_growth_log(const std::filesystem::path& path);

}  // namespace cnl::cactus
