#include "tseg/selftrain.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "tseg/binary_io.hpp"
#include "tseg/common.hpp"
#include "tseg/parallel.hpp"

namespace tseg {

double confidence(std::span<const double> posterior) {
  return *std::max_element(posterior.begin(), posterior.end());
}

PseudoLabelTerm PseudoLabelSet::term(std::span<const SampleGrid> samples) const {
  if (samples.size() != labels.size()) {
    throw ConfigError("pseudo-label set does not align with target samples");
  }
  return PseudoLabelTerm{samples, labels, mask};
}

PseudoLabelSet make_pseudolabels(std::span<const PosteriorGrid> posteriors, double threshold,
                                 std::string source_kind, std::vector<std::string> source_ids) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw ConfigError("confidence threshold must lie in [0, 1]");
  }
  PseudoLabelSet set;
  set.threshold = threshold;
  set.source_kind = std::move(source_kind);
  set.source_ids = std::move(source_ids);
  std::size_t total = 0;
  std::size_t masked = 0;
  for (const auto& grid : posteriors) {
    auto& labels = set.labels.emplace_back(grid.pixel_count());
    auto& mask = set.mask.emplace_back(grid.pixel_count());
    for (std::size_t p = 0; p < grid.pixel_count(); ++p) {
      const auto post = grid.pixel(p);
      labels[p] = static_cast<std::uint8_t>(argmax(post));
      // Strict: a pixel exactly at the threshold is excluded.
      mask[p] = confidence(post) > threshold ? 1 : 0;
      masked += mask[p] ? 0 : 1;
    }
    total += grid.pixel_count();
  }
  set.masked_fraction = total ? static_cast<double>(masked) / static_cast<double>(total) : 0.0;
  return set;
}

void save_pseudolabels(const std::filesystem::path& dir, const PseudoLabelSet& set,
                       std::span<const SampleGrid> samples) {
  if (samples.size() != set.labels.size()) {
    throw ConfigError("pseudo-label set does not align with target samples");
  }
  std::filesystem::create_directories(dir);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const io::GridHeader h{static_cast<std::uint16_t>(samples[i].height),
                           static_cast<std::uint16_t>(samples[i].width), 1};
    io::write_u8_grid(dir / (samples[i].id + ".plab"), h, set.labels[i]);
    io::write_u8_grid(dir / (samples[i].id + ".mask"), h, set.mask[i]);
    ids.push_back(samples[i].id);
  }
  nlohmann::json m;
  m["format"] = "tseg-pseudolabels";
  m["threshold"] = set.threshold;
  m["source_kind"] = set.source_kind;
  m["source_ids"] = set.source_ids;
  m["masked_fraction"] = set.masked_fraction;
  m["sample_ids"] = ids;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write pseudo-label manifest in " + dir.string());
  f << m.dump(2) << '\n';
}

PseudoLabelSet load_pseudolabels(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("pseudo-label manifest not found in " + dir.string());
  const auto m = nlohmann::json::parse(f);
  PseudoLabelSet set;
  set.threshold = m.at("threshold").get<double>();
  set.source_kind = m.at("source_kind").get<std::string>();
  set.source_ids = m.at("source_ids").get<std::vector<std::string>>();
  set.masked_fraction = m.at("masked_fraction").get<double>();
  for (const auto& id : m.at("sample_ids")) {
    io::GridHeader h;
    set.labels.push_back(io::read_u8_grid(dir / (id.get<std::string>() + ".plab"), h));
    set.mask.push_back(io::read_u8_grid(dir / (id.get<std::string>() + ".mask"), h));
  }
  return set;
}

std::vector<std::string> Ensemble::member_ids() const {
  std::vector<std::string> ids;
  for (const auto& m : members) ids.push_back("model-seed-" + std::to_string(m.seed));
  return ids;
}

TrainResult train_member(const ClassifierSpec& spec, const LabeledSet& labeled,
                         const Objective& objective, TrainConfig config, std::uint64_t seed) {
  config.seed = seed;
  return train(spec, init_params(spec, seed, config.init_scale), labeled, objective, config);
}

Ensemble train_ensemble(const ClassifierSpec& spec, const LabeledSet& labeled,
                        const Objective& objective, const TrainConfig& base_config,
                        std::span<const std::uint64_t> seeds, int workers) {
  if (seeds.empty()) throw ConfigError("ensemble needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("ensemble seeds must be distinct");
  }
  Ensemble ens;
  ens.spec = spec;
  ens.members.resize(seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t i) {
    ens.members[i].seed = seeds[i];
    ens.members[i].params = train_member(spec, labeled, objective, base_config, seeds[i]).params;
  });
  return ens;
}

PosteriorGrid average_posteriors(std::span<const PosteriorGrid> grids) {
  if (grids.empty()) throw ConfigError("cannot average an empty set of predictions");
  PosteriorGrid out = grids.front();
  for (std::size_t g = 1; g < grids.size(); ++g) {
    if (grids[g].probs.size() != out.probs.size() || grids[g].num_classes != out.num_classes) {
      throw ConfigError("posterior grids differ in shape");
    }
    for (std::size_t k = 0; k < out.probs.size(); ++k) out.probs[k] += grids[g].probs[k];
  }
  const double inv = 1.0 / static_cast<double>(grids.size());
  if (grids.size() > 1) {
    for (auto& v : out.probs) v *= inv;
  }
  return out;
}

PosteriorGrid ensemble_predict(const Ensemble& ensemble, const SampleGrid& sample) {
  if (ensemble.members.empty()) throw ConfigError("ensemble is empty");
  std::vector<PosteriorGrid> outs;
  outs.reserve(ensemble.size());
  for (const auto& m : ensemble.members) outs.push_back(forward(ensemble.spec, m.params, sample));
  return average_posteriors(outs);
}

std::vector<PosteriorGrid> predict_all(const ClassifierSpec& spec, const ParamVector& params,
                                       std::span<const SampleGrid> samples) {
  std::vector<PosteriorGrid> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(forward(spec, params, s));
  return out;
}

std::vector<PosteriorGrid> predict_all(const Ensemble& ensemble,
                                       std::span<const SampleGrid> samples) {
  std::vector<PosteriorGrid> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(ensemble_predict(ensemble, s));
  return out;
}

PipelineResult self_train_pipeline(const ClassifierSpec& spec, const LabeledSet& labeled,
                                   const TargetSet& target, const PipelineConfig& config) {
  if (target.size() == 0) throw ConfigError("target set is empty");
  const auto& samples = target.samples();
  PipelineResult r;
  r.phase1 = train_ensemble(spec, labeled, Objective::supervised(), config.train,
                            config.source_seeds, config.workers);
  r.phase1_target = predict_all(r.phase1, samples);
  r.pseudo = make_pseudolabels(r.phase1_target, config.threshold,
                               r.phase1.size() == 1 ? "single-model" : "ensemble",
                               r.phase1.member_ids());
  r.phase2 = train_ensemble(spec, labeled, Objective::pseudo_label(r.pseudo.term(samples)),
                            config.train, config.retrain_seeds, config.workers);
  r.transductive = predict_all(r.phase2, samples);
  return r;
}

}  // namespace tseg
