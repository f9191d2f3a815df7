#include "nsd/persist.hpp"

#include <algorithm>
#include <regex>

#include "json.hpp"
#include "nsd/error.hpp"

namespace nsd {

using nlohmann::json;

namespace {

json spec_to_json(const ModelSpec& s) {
  return {{"family", to_string(s.family)},
          {"depth", s.depth},
          {"width", s.width},
          {"input_shape", s.input_shape},
          {"num_classes", s.num_classes}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.family = model_family_from_string(j.at("family").get<std::string>());
  s.depth = j.at("depth").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.input_shape = j.at("input_shape").get<std::array<std::size_t, 3>>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.validate();
  return s;
}

json parse_meta(const Container& c) {
  try {
    return json::parse(c.at("meta").to_text());
  } catch (const json::exception& e) {
    throw FormatError(std::string("container meta record is not valid JSON: ") + e.what());
  }
}

// Wraps JSON access errors (missing keys, wrong types) as FormatError.
template <class Fn>
auto guarded(const char* what, Fn fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

Container trajectory_to_container(const Trajectory& t, std::uint64_t data_fingerprint) {
  Container c;
  json meta{{"kind", "trajectory"},
            {"spec", spec_to_json(t.spec)},
            {"seed", t.seed},
            {"stride", t.stride},
            {"snapshots", t.snapshots.size()},
            {"fingerprint", data_fingerprint}};
  c.add(Record::from_text("meta", meta.dump()));
  for (std::size_t i = 0; i < t.snapshots.size(); ++i) {
    const auto& flat = t.snapshots[i].flat;
    c.add(Record::from_array("theta/" + std::to_string(i), NdArray(Shape{flat.size()}, flat)));
  }
  return c;
}

Trajectory trajectory_from_container(const Container& c, std::uint64_t* data_fingerprint) {
  const json meta = parse_meta(c);
  return guarded("trajectory meta", [&] {
    if (meta.at("kind") != "trajectory") throw FormatError("container is not a trajectory");
    Trajectory t;
    t.spec = spec_from_json(meta.at("spec"));
    t.seed = meta.at("seed").get<std::uint64_t>();
    t.stride = meta.at("stride").get<std::size_t>();
    const auto layout = make_layout(t.spec);
    const auto n = meta.at("snapshots").get<std::size_t>();
    for (std::size_t i = 0; i < n; ++i) {
      const NdArray a = c.at("theta/" + std::to_string(i)).to_array();
      if (a.size() != layout.total) {
        throw FormatError("theta/" + std::to_string(i) + " has " + std::to_string(a.size()) +
                          " values, spec needs " + std::to_string(layout.total));
      }
      t.snapshots.push_back({layout, a.vec()});
    }
    if (data_fingerprint) *data_fingerprint = meta.at("fingerprint").get<std::uint64_t>();
    t.validate();
    return t;
  });
}

void save_bank(const std::filesystem::path& dir, const ExpertBank& bank) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t k = 0; k < bank.trajectories.size(); ++k) {
    write_container(dir / ("expert_" + std::to_string(k) + ".nsdt"),
                    trajectory_to_container(bank.trajectories[k], bank.fingerprint));
  }
}

ExpertBank load_bank(const std::filesystem::path& dir) {
  std::vector<std::pair<std::size_t, std::filesystem::path>> files;
  const std::regex pattern(R"(expert_(\d+)\.nsdt)");
  std::error_code ec;
  for (std::filesystem::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
    std::smatch m;
    const std::string name = it->path().filename().string();
    if (std::regex_match(name, m, pattern)) files.emplace_back(std::stoull(m[1]), it->path());
  }
  if (files.empty()) throw IoError("no expert_<k>.nsdt files in " + dir.string());
  std::sort(files.begin(), files.end());
  ExpertBank bank;
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::uint64_t fp = 0;
    bank.trajectories.push_back(trajectory_from_container(read_container(files[i].second), &fp));
    if (i == 0) {
      bank.fingerprint = fp;
    } else if (fp != bank.fingerprint) {
      throw FormatError(files[i].second.string() + " was trained on different data");
    }
  }
  try {
    bank.validate();
  } catch (const Error& e) {
    throw FormatError("expert bank in " + dir.string() + ": " + e.what());
  }
  return bank;
}

Container state_to_container(const DistillState& s, const std::string& run_tag) {
  Container c;
  json meta{{"kind", "distill_state"},
            {"label_rule", to_string(s.label_rule)},
            {"num_classes", s.num_classes},
            {"step", s.step},
            {"velocity", s.velocity.size()},
            {"run", run_tag}};
  json tensors = json::array();
  for (std::size_t i = 0; i < s.tensors.size(); ++i) {
    tensors.push_back({{"class_id", s.tensors[i].class_id},
                       {"trainable", s.tensors[i].values.requires_grad()}});
    c.add(Record::from_array("tensor/" + std::to_string(i), s.tensors[i].values.value()));
  }
  json kernels = json::array();
  for (std::size_t k = 0; k < s.kernels.size(); ++k) {
    const auto& kern = s.kernels[k];
    json factors = json::array();
    for (const auto& f : kern.factors) {
      factors.push_back({{"trainable", f.trainable()}, {"analytic", f.analytic}});
      c.add(Record::from_array("kernel/" + std::to_string(k) + "/mode" +
                                   std::to_string(f.mode + 1),
                               f.values.value()));
    }
    json kj{{"kernel_id", kern.kernel_id}, {"class_id", kern.class_id}, {"factors", factors}};
    if (kern.band_probs) kj["band_probs"] = *kern.band_probs;
    kernels.push_back(kj);
  }
  meta["tensors"] = tensors;
  meta["kernels"] = kernels;
  c.records.insert(c.records.begin(), Record::from_text("meta", meta.dump()));
  for (std::size_t i = 0; i < s.velocity.size(); ++i)
    c.add(Record::from_array("velocity/" + std::to_string(i), s.velocity[i]));
  return c;
}

DistillState state_from_container(const Container& c, std::string* run_tag) {
  const json meta = parse_meta(c);
  DistillState s = guarded("state meta", [&] {
    if (meta.at("kind") != "distill_state") {
      throw FormatError("container is not a distillation state");
    }
    DistillState s;
    s.label_rule = label_rule_from_string(meta.at("label_rule").get<std::string>());
    s.num_classes = meta.at("num_classes").get<int>();
    s.step = meta.at("step").get<std::size_t>();
    const auto& tensors = meta.at("tensors");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      NdArray v = c.at("tensor/" + std::to_string(i)).to_array();
      if (v.shape().size() != 4) throw FormatError("tensor/" + std::to_string(i) + " is not 4-mode");
      s.tensors.push_back({tensors[i].at("trainable").get<bool>()
                               ? ad::Var::parameter(std::move(v))
                               : ad::Var::constant(std::move(v)),
                           tensors[i].at("class_id").get<int>()});
    }
    const auto& kernels = meta.at("kernels");
    for (std::size_t k = 0; k < kernels.size(); ++k) {
      SeparableKernel kern;
      kern.kernel_id = kernels[k].at("kernel_id").get<int>();
      kern.class_id = kernels[k].at("class_id").get<int>();
      if (kernels[k].contains("band_probs"))
        kern.band_probs = kernels[k].at("band_probs").get<BandProbs>();
      const auto& factors = kernels[k].at("factors");
      if (factors.size() != 4) throw FormatError("kernel " + std::to_string(k) + " needs 4 factors");
      for (std::size_t m = 0; m < 4; ++m) {
        NdArray v = c.at("kernel/" + std::to_string(k) + "/mode" + std::to_string(m + 1))
                        .to_array();
        const bool trainable = factors[m].at("trainable").get<bool>();
        kern.factors[m] = {m,
                           trainable ? ad::Var::parameter(std::move(v))
                                     : ad::Var::constant(std::move(v)),
                           factors[m].at("analytic").get<bool>()};
      }
      s.kernels.push_back(std::move(kern));
    }
    const auto nv = meta.at("velocity").get<std::size_t>();
    for (std::size_t i = 0; i < nv; ++i)
      s.velocity.push_back(c.at("velocity/" + std::to_string(i)).to_array());
    if (run_tag) *run_tag = meta.at("run").get<std::string>();
    return s;
  });
  try {
    s.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("stored state is inconsistent: ") + e.what());
  }
  return s;
}

}  // namespace nsd
