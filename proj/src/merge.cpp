#include "ewr/merge.hpp"

#include <cstdint>
#include <fstream>

#include "ewr/error.hpp"
#include "json.hpp"

namespace ewr::merge {

namespace {

double sign_of(Role role) { return role == Role::expert ? 1.0 : -1.0; }

// Merged checkpoints keep the base's descriptive metadata (model config keys)
// so they reload as models; role is overridden.
store::TensorMap::Metadata merged_metadata(const store::TensorMap& base) {
  store::TensorMap::Metadata meta = base.metadata();
  meta[store::kRoleKey] = "merged";
  meta.erase(store::kBaseFingerprintKey);
  meta.erase(store::kSourceFingerprintKey);
  meta.erase(store::kModelFingerprintKey);
  return meta;
}

void require_nonnegative_fisher(const store::TensorMap& fisher,
                                const std::string& what) {
  for (const auto& [name, t] : fisher.entries()) {
    for (float v : t.data) {
      if (v < 0.0f)
        fail(ErrorKind::negative_fisher,
             what + ": negative Fisher entry in tensor " + name);
    }
  }
}

void check_recipe_alignment(const MergeRecipe& recipe) {
  if (!recipe.base) fail(ErrorKind::invalid_config, "merge recipe has no base");
  for (const auto& c : recipe.components) {
    if (!c.task_vector)
      fail(ErrorKind::invalid_config, "merge component has no task vector");
    if (c.lambda < 0.0)
      fail(ErrorKind::invalid_config, "component lambda must be >= 0");
    store::require_mergeable(*recipe.base, *c.task_vector, "task vector");
    if (c.fisher) {
      store::require_mergeable(*recipe.base, *c.fisher, "component fisher");
      require_nonnegative_fisher(*c.fisher, "component fisher");
    }
  }
  if (recipe.base_fisher) {
    store::require_mergeable(*recipe.base, *recipe.base_fisher, "base fisher");
    require_nonnegative_fisher(*recipe.base_fisher, "base fisher");
  }
}

}  // namespace

Role role_from_string(const std::string& s) {
  if (s == "expert") return Role::expert;
  if (s == "anti_expert") return Role::anti_expert;
  fail(ErrorKind::invalid_config, "unknown role: " + s);
}

std::string to_string(Role role) {
  return role == Role::expert ? "expert" : "anti_expert";
}

Mode mode_from_string(const std::string& s) {
  if (s == "task_arithmetic") return Mode::task_arithmetic;
  if (s == "ewr") return Mode::ewr;
  fail(ErrorKind::invalid_config, "unknown merge mode: " + s);
}

std::string to_string(Mode mode) {
  return mode == Mode::task_arithmetic ? "task_arithmetic" : "ewr";
}

ZeroDenomPolicy policy_from_string(const std::string& s) {
  if (s == "keep_base") return ZeroDenomPolicy::keep_base;
  if (s == "zero") return ZeroDenomPolicy::zero;
  fail(ErrorKind::invalid_config, "unknown zero_denominator_policy: " + s);
}

std::string to_string(ZeroDenomPolicy policy) {
  return policy == ZeroDenomPolicy::keep_base ? "keep_base" : "zero";
}

store::TensorMap task_vector(const store::TensorMap& fine_tuned,
                             const store::TensorMap& base) {
  store::require_mergeable(fine_tuned, base, "task_vector");
  store::TensorMap out;
  for (const auto& [name, ft] : fine_tuned.entries()) {
    const store::Tensor& b = base.at(name);
    store::Tensor t;
    t.shape = ft.shape;
    t.data.resize(ft.data.size());
    for (std::size_t i = 0; i < ft.data.size(); ++i) {
      t.data[i] = static_cast<float>(static_cast<double>(ft.data[i]) -
                                     static_cast<double>(b.data[i]));
    }
    out.set(name, std::move(t));
  }
  out.set_metadata(store::kRoleKey, "task_vector");
  out.set_metadata(store::kBaseFingerprintKey, store::fingerprint(base));
  out.set_metadata(store::kSourceFingerprintKey, store::fingerprint(fine_tuned));
  return out;
}

store::TensorMap apply_task_arithmetic(const MergeRecipe& recipe) {
  check_recipe_alignment(recipe);
  store::TensorMap out;
  for (const auto& [name, b] : recipe.base->entries()) {
    store::Tensor t;
    t.shape = b.shape;
    t.data.resize(b.data.size());
    for (std::size_t i = 0; i < b.data.size(); ++i) {
      double acc = b.data[i];
      for (const auto& c : recipe.components) {
        acc += sign_of(c.role) * c.lambda *
               static_cast<double>(c.task_vector->at(name).data[i]);
      }
      t.data[i] = static_cast<float>(acc);
    }
    out.set(name, std::move(t));
  }
  out.metadata() = merged_metadata(*recipe.base);
  return out;
}

store::TensorMap cape(const store::TensorMap& base,
                      const store::TensorMap& expert,
                      const store::TensorMap& anti_expert, double lambda) {
  if (lambda < 0.0) fail(ErrorKind::invalid_config, "cape lambda must be >= 0");
  store::require_mergeable(base, expert, "cape expert");
  store::require_mergeable(base, anti_expert, "cape anti-expert");
  store::TensorMap out;
  for (const auto& [name, b] : base.entries()) {
    const auto& e = expert.at(name).data;
    const auto& a = anti_expert.at(name).data;
    store::Tensor t;
    t.shape = b.shape;
    t.data.resize(b.data.size());
    for (std::size_t i = 0; i < b.data.size(); ++i) {
      t.data[i] = static_cast<float>(
          static_cast<double>(b.data[i]) +
          lambda * (static_cast<double>(e[i]) - static_cast<double>(a[i])));
    }
    out.set(name, std::move(t));
  }
  out.metadata() = merged_metadata(base);
  return out;
}

store::TensorMap ewr(const MergeRecipe& recipe) {
  if (recipe.mode != Mode::ewr)
    fail(ErrorKind::invalid_config, "ewr() requires mode=ewr");
  check_recipe_alignment(recipe);
  if (!recipe.base_fisher)
    fail(ErrorKind::missing_fisher, "ewr merge requires a base Fisher");
  for (const auto& c : recipe.components) {
    if (!c.fisher)
      fail(ErrorKind::missing_fisher, "ewr merge requires a Fisher per component");
  }
  if (recipe.base_lambda < 0.0)
    fail(ErrorKind::invalid_config, "base_lambda must be >= 0");

  store::TensorMap out;
  for (const auto& [name, b] : recipe.base->entries()) {
    const auto& fb = recipe.base_fisher->at(name).data;
    store::Tensor t;
    t.shape = b.shape;
    t.data.resize(b.data.size());
    for (std::size_t i = 0; i < b.data.size(); ++i) {
      double num = recipe.base_lambda * static_cast<double>(fb[i]) *
                   static_cast<double>(b.data[i]);
      double den = recipe.base_lambda * static_cast<double>(fb[i]);
      for (const auto& c : recipe.components) {
        double f = c.fisher->at(name).data[i];
        double tau = c.task_vector->at(name).data[i];
        num += sign_of(c.role) * c.lambda * f * tau;
        den += c.lambda * f;
      }
      if (den == 0.0) {
        t.data[i] = recipe.zero_denominator_policy == ZeroDenomPolicy::keep_base
                        ? b.data[i]
                        : 0.0f;
      } else {
        t.data[i] = static_cast<float>(num / den);
      }
    }
    out.set(name, std::move(t));
  }
  out.metadata() = merged_metadata(*recipe.base);
  return out;
}

store::TensorMap ewr_closed_form_single(const store::TensorMap& base,
                                        const store::TensorMap& base_fisher,
                                        const store::TensorMap& anti_expert_params,
                                        const store::TensorMap& tau_fisher,
                                        double lambda0, double lambda1,
                                        ZeroDenomPolicy policy) {
  store::require_mergeable(base, base_fisher, "closed form base fisher");
  store::require_mergeable(base, anti_expert_params, "closed form anti-expert");
  store::require_mergeable(base, tau_fisher, "closed form tau fisher");
  require_nonnegative_fisher(base_fisher, "closed form base fisher");
  require_nonnegative_fisher(tau_fisher, "closed form tau fisher");
  store::TensorMap out;
  for (const auto& [name, b] : base.entries()) {
    const auto& f0 = base_fisher.at(name).data;
    const auto& ae = anti_expert_params.at(name).data;
    const auto& f1 = tau_fisher.at(name).data;
    store::Tensor t;
    t.shape = b.shape;
    t.data.resize(b.data.size());
    for (std::size_t i = 0; i < b.data.size(); ++i) {
      double den = lambda0 * static_cast<double>(f0[i]) +
                   lambda1 * static_cast<double>(f1[i]);
      if (den == 0.0) {
        t.data[i] = policy == ZeroDenomPolicy::keep_base ? b.data[i] : 0.0f;
      } else {
        double coeff = lambda1 * static_cast<double>(f1[i]) / den;
        t.data[i] = static_cast<float>(static_cast<double>(b.data[i]) -
                                       coeff * static_cast<double>(ae[i]));
      }
    }
    out.set(name, std::move(t));
  }
  out.metadata() = merged_metadata(base);
  return out;
}

store::TensorMap run(const MergeRecipe& recipe) {
  return recipe.mode == Mode::ewr ? ewr(recipe) : apply_task_arithmetic(recipe);
}

MergeRecipe load_recipe(const std::filesystem::path& json_path,
                        bool allow_fingerprint_mismatch) {
  std::ifstream in(json_path);
  if (!in) fail(ErrorKind::io, "cannot open recipe " + json_path.string());
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object())
    fail(ErrorKind::data, "recipe " + json_path.string() + " is not a JSON object");

  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_relative()) fp = json_path.parent_path() / fp;
    return fp;
  };

  MergeRecipe recipe;
  if (!doc.contains("mode") || !doc.contains("base"))
    fail(ErrorKind::data, "recipe must contain mode and base");
  recipe.mode = mode_from_string(doc["mode"].get<std::string>());
  recipe.base = std::make_shared<store::TensorMap>(
      store::load(resolve(doc["base"].get<std::string>())));
  recipe.base_lambda = doc.value("base_lambda", 1.0);
  if (doc.contains("base_fisher") && !doc["base_fisher"].is_null())
    recipe.base_fisher = std::make_shared<store::TensorMap>(
        store::load(resolve(doc["base_fisher"].get<std::string>())));
  if (doc.contains("zero_denominator_policy"))
    recipe.zero_denominator_policy =
        policy_from_string(doc["zero_denominator_policy"].get<std::string>());

  std::string base_fp = store::fingerprint(*recipe.base);
  if (recipe.base_fisher && !allow_fingerprint_mismatch) {
    std::string want =
        recipe.base_fisher->metadata_or(store::kModelFingerprintKey, "");
    if (!want.empty() && want != base_fp)
      fail(ErrorKind::fingerprint_mismatch,
           "base fisher was computed at a different checkpoint than the recipe base "
           "(pass --allow-fingerprint-mismatch to override)");
  }

  for (const auto& cj : doc.value("components", nlohmann::json::array())) {
    MergeComponent c;
    c.role = role_from_string(cj.at("role").get<std::string>());
    c.lambda = cj.at("lambda").get<double>();
    c.task_vector = std::make_shared<store::TensorMap>(
        store::load(resolve(cj.at("task_vector").get<std::string>())));
    if (cj.contains("fisher") && !cj["fisher"].is_null())
      c.fisher = std::make_shared<store::TensorMap>(
          store::load(resolve(cj["fisher"].get<std::string>())));
    if (!allow_fingerprint_mismatch) {
      std::string want = c.task_vector->metadata_or(store::kBaseFingerprintKey, "");
      if (!want.empty() && want != base_fp)
        fail(ErrorKind::fingerprint_mismatch,
             "task vector was derived from a different base than the recipe base "
             "(pass --allow-fingerprint-mismatch to override)");
      if (c.fisher) {
        std::string fisher_at = c.fisher->metadata_or(store::kModelFingerprintKey, "");
        std::string tuned_fp =
            c.task_vector->metadata_or(store::kSourceFingerprintKey, "");
        if (!fisher_at.empty() && !tuned_fp.empty() && fisher_at != tuned_fp)
          fail(ErrorKind::fingerprint_mismatch,
               "component fisher was computed at a different checkpoint than the "
               "task vector's fine-tuned model (pass --allow-fingerprint-mismatch "
               "to override)");
      }
    }
    recipe.components.push_back(std::move(c));
  }
  return recipe;
}

}  // namespace ewr::merge
