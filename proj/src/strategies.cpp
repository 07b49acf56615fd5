#include "strategies.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

namespace selftrain {

namespace {

using nlohmann::json;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool by_confidence(const Prediction* a, const Prediction* b) {
  if (a->confidence != b->confidence) return a->confidence > b->confidence;
  return a->instance_id < b->instance_id;
}

bool by_entropy(const Prediction* a, const Prediction* b) {
  if (a->entropy != b->entropy) return a->entropy < b->entropy;
  return a->instance_id < b->instance_id;
}

bool by_id(const Prediction* a, const Prediction* b) { return a->instance_id < b->instance_id; }

}  // namespace

double confidence(const ProbDist& dist) { return dist[argmax(dist)]; }

double entropy(const ProbDist& dist) {
  double h = 0.0;
  for (std::size_t c = 0; c < dist.size(); ++c) {
    if (dist[c] > 0.0) h -= dist[c] * std::log(dist[c]);
  }
  return h;
}

Prediction Prediction::from(std::string instance_id, ProbDist dist) {
  Prediction p;
  p.instance_id = std::move(instance_id);
  p.pseudo_label = argmax(dist);
  p.confidence = dist[p.pseudo_label];
  p.entropy = selftrain::entropy(dist);
  p.dist = std::move(dist);
  return p;
}

std::string SelectionStrategy::name() const {
  return std::visit(overloaded{
                        [](const ConfThreshold&) { return "conf_threshold"; },
                        [](const EntThreshold&) { return "ent_threshold"; },
                        [](const MaxConfTopK&) { return "max_conf"; },
                        [](const MinEntTopK&) { return "min_ent"; },
                        [](const SoftLabel&) { return "soft_label"; },
                        [](const RandomBatch&) { return "random"; },
                    },
                    rule);
}

void SelectionStrategy::validate() const {
  if (batch_cap == 0) throw InvalidArgument("batch_cap must be positive");
  std::visit(overloaded{
                 [](const ConfThreshold& s) {
                   if (!(s.t > 0.0 && s.t <= 1.0)) throw InvalidArgument("conf_threshold t must lie in (0, 1]");
                 },
                 [](const EntThreshold& s) {
                   if (!(s.t >= 0.0) || !std::isfinite(s.t)) throw InvalidArgument("ent_threshold t must be >= 0");
                 },
                 [](const MaxConfTopK& s) {
                   if (s.k == 0) throw InvalidArgument("max_conf k must be positive");
                 },
                 [](const MinEntTopK& s) {
                   if (s.k == 0) throw InvalidArgument("min_ent k must be positive");
                 },
                 [](const SoftLabel&) {},
                 [](const RandomBatch& s) {
                   if (s.b == 0) throw InvalidArgument("random b must be positive");
                 },
             },
             rule);
}

SelectionStrategy strategy_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("strategy block must be an object");
  const std::set<std::string> allowed = {"name", "t", "k", "b", "batch_cap"};
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw InvalidArgument("unknown strategy key '" + key + "'");
  }
  const auto name = j.at("name").get<std::string>();
  const auto need = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw InvalidArgument("strategy '" + name + "' requires '" + key + "'");
    return j.at(key);
  };
  const auto forbid_except = [&](std::initializer_list<const char*> keep) {
    for (const char* key : {"t", "k", "b"}) {
      const bool kept = std::any_of(keep.begin(), keep.end(), [&](const char* k) { return std::string(k) == key; });
      if (!kept && j.contains(key)) {
        throw InvalidArgument("strategy '" + name + "' does not take '" + key + "'");
      }
    }
  };
  SelectionStrategy s;
  if (name == "conf_threshold") {
    forbid_except({"t"});
    s.rule = ConfThreshold{need("t").get<double>()};
  } else if (name == "ent_threshold") {
    forbid_except({"t"});
    s.rule = EntThreshold{need("t").get<double>()};
  } else if (name == "max_conf") {
    forbid_except({"k"});
    s.rule = MaxConfTopK{need("k").get<std::size_t>()};
  } else if (name == "min_ent") {
    forbid_except({"k"});
    s.rule = MinEntTopK{need("k").get<std::size_t>()};
  } else if (name == "soft_label") {
    forbid_except({});
    s.rule = SoftLabel{};
  } else if (name == "random") {
    forbid_except({"b"});
    s.rule = RandomBatch{j.value("b", kDefaultBatchCap)};
  } else {
    throw InvalidArgument("unknown strategy '" + name + "'");
  }
  s.batch_cap = j.value("batch_cap", kDefaultBatchCap);
  s.validate();
  return s;
}

json to_json(const SelectionStrategy& strategy) {
  json j = {{"name", strategy.name()}, {"batch_cap", strategy.batch_cap}};
  std::visit(overloaded{
                 [&](const ConfThreshold& s) { j["t"] = s.t; },
                 [&](const EntThreshold& s) { j["t"] = s.t; },
                 [&](const MaxConfTopK& s) { j["k"] = s.k; },
                 [&](const MinEntTopK& s) { j["k"] = s.k; },
                 [&](const SoftLabel&) {},
                 [&](const RandomBatch& s) { j["b"] = s.b; },
             },
             strategy.rule);
  return j;
}

SelectionResult select(const SelectionStrategy& strategy, const std::vector<Prediction>& predictions,
                       std::uint64_t rng_seed) {
  strategy.validate();
  std::vector<const Prediction*> pool;
  pool.reserve(predictions.size());
  for (const auto& p : predictions) pool.push_back(&p);
  std::sort(pool.begin(), pool.end(), by_id);
  for (std::size_t i = 1; i < pool.size(); ++i) {
    if (pool[i]->instance_id == pool[i - 1]->instance_id) {
      throw InvalidArgument("duplicate instance id '" + pool[i]->instance_id + "' in predictions");
    }
  }

  std::vector<const Prediction*> kept;
  const auto take_top = [&](std::size_t k, auto&& less) {
    std::sort(pool.begin(), pool.end(), less);
    kept.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(k, pool.size())));
  };
  std::visit(overloaded{
                 [&](const ConfThreshold& s) {
                   for (const auto* p : pool) if (p->confidence > s.t) kept.push_back(p);
                 },
                 [&](const EntThreshold& s) {
                   for (const auto* p : pool) if (p->entropy < s.t) kept.push_back(p);
                 },
                 [&](const MaxConfTopK& s) { take_top(s.k, by_confidence); },
                 [&](const MinEntTopK& s) { take_top(s.k, by_entropy); },
                 [&](const SoftLabel&) { kept = pool; },
                 [&](const RandomBatch& s) {
                   Rng rng(rng_seed);
                   rng.shuffle(pool);
                   kept.assign(pool.begin(),
                               pool.begin() + static_cast<std::ptrdiff_t>(std::min(s.b, pool.size())));
                 },
             },
             strategy.rule);

  if (kept.size() > strategy.batch_cap) {
    std::sort(kept.begin(), kept.end(), by_confidence);
    kept.resize(strategy.batch_cap);
  }
  std::sort(kept.begin(), kept.end(), by_id);

  SelectionResult out;
  if (strategy.is_soft()) {
    for (const auto* p : kept) out.soft_selected.emplace_back(p->instance_id, p->dist);
  } else {
    for (const auto* p : kept) out.hard_selected.emplace_back(p->instance_id, p->pseudo_label);
  }
  return out;
}

}  // namespace selftrain
