#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ewr/tensor_map.hpp"

namespace ewr::merge {

enum class Role { expert, anti_expert };
enum class Mode { task_arithmetic, ewr };

// What to do at coordinates where every Fisher weight vanishes: keep the base
// parameter, or zero the coordinate (kept for ablation).
enum class ZeroDenomPolicy { keep_base, zero };

Role role_from_string(const std::string& s);
std::string to_string(Role role);
Mode mode_from_string(const std::string& s);
std::string to_string(Mode mode);
ZeroDenomPolicy policy_from_string(const std::string& s);
std::string to_string(ZeroDenomPolicy policy);

using TensorMapPtr = std::shared_ptr<const store::TensorMap>;

struct MergeComponent {
  Role role = Role::anti_expert;
  double lambda = 0.0;       // scalar scaling factor, >= 0; sign comes from role
  TensorMapPtr task_vector;  // fine-tuned minus base parameters
  TensorMapPtr fisher;       // diagonal Fisher at the fine-tuned point (ewr only)
};

struct MergeRecipe {
  TensorMapPtr base;
  double base_lambda = 1.0;
  TensorMapPtr base_fisher;  // required when mode == ewr
  std::vector<MergeComponent> components;
  Mode mode = Mode::task_arithmetic;
  ZeroDenomPolicy zero_denominator_policy = ZeroDenomPolicy::keep_base;
};

// Elementwise fine_tuned - base. Output metadata records role=task_vector,
// base_fingerprint and source_fingerprint so later merges can be verified.
store::TensorMap task_vector(const store::TensorMap& fine_tuned,
                             const store::TensorMap& base);

// theta_new = base + sum_i sign(role_i) * lambda_i * tau_i. Fishers and
// base_lambda are ignored (the base coefficient is fixed at 1 in this mode).
store::TensorMap apply_task_arithmetic(const MergeRecipe& recipe);

// Contrastive parameter estimation: base + lambda * (expert - anti_expert).
store::TensorMap cape(const store::TensorMap& base,
                      const store::TensorMap& expert,
                      const store::TensorMap& anti_expert, double lambda);

// Fisher-weighted removal/addition. Per coordinate j:
//   N_j = l0*f_base_j*base_j + sum_i sign_i*l_i*f_i_j*tau_i_j
//   D_j = l0*f_base_j       + sum_i        l_i*f_i_j
//   out_j = N_j / D_j, with the zero-denominator policy where D_j == 0.
// The denominator uses all-positive coefficients; the role carries the
// numerator sign.
store::TensorMap ewr(const MergeRecipe& recipe);

// Independent oracle for the single-anti-expert case, computed directly from
// the anti-expert parameters instead of the task vector:
//   out_j = base_j - (l1*f_tau_j / (l0*f_base_j + l1*f_tau_j)) * anti_j
store::TensorMap ewr_closed_form_single(
    const store::TensorMap& base, const store::TensorMap& base_fisher,
    const store::TensorMap& anti_expert_params, const store::TensorMap& tau_fisher,
    double lambda0, double lambda1,
    ZeroDenomPolicy policy = ZeroDenomPolicy::keep_base);

// Dispatch on recipe.mode.
store::TensorMap run(const MergeRecipe& recipe);

// Reads the JSON recipe document ({mode, base, base_lambda, base_fisher?,
// components:[{role, lambda, task_vector, fisher?}], zero_denominator_policy})
// and loads all referenced checkpoints. Relative paths resolve against the
// recipe file's directory. Verifies task-vector base fingerprints against the
// recipe base, and Fisher model fingerprints against their checkpoints,
// unless allow_fingerprint_mismatch is set.
MergeRecipe load_recipe(const std::filesystem::path& json_path,
                        bool allow_fingerprint_mismatch = false);

}  // namespace ewr::merge
