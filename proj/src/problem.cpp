#include "cjmix/problem.hpp"

#include "cjmix/errors.hpp"

namespace cjmix {

Eigen::VectorXd Problem::respondent_weights() const {
  Eigen::VectorXd w(respondents());
  for (int i = 0; i < respondents(); ++i) w(i) = tasks_of(i);
  return w / static_cast<double>(rows());
}

void Problem::validate() const {
  if (static_cast<int>(row_start.size()) != respondents() + 1 || row_start.front() != 0 ||
      row_start.back() != rows())
    throw InputError("row offsets do not match the design");
  if (y.size() != rows()) throw InputError("outcome length does not match the design");
  for (int i = 0; i < respondents(); ++i)
    if (tasks_of(i) <= 0) throw InputError("respondent " + std::to_string(i) + " has no tasks");
  for (const auto& m : penalties.matrices)
    if (m.rows() != dim() || m.cols() != dim()) throw InputError("penalty dimension mismatch");
  if (penalties.weights.size() != penalties.size()) throw InputError("penalty weight count mismatch");
  if (main_design.size() && main_design.rows() != rows())
    throw InputError("mains-only design row count mismatch");
}

Problem build_problem(const Dataset& data, const ModelSpec& spec) {
  data.validate();
  Problem pr;
  pr.kind = data.kind;
  pr.layout = Layout(data.factors, spec.interactions);
  const ConstraintMatrix cm = build_constraints(pr.layout);
  const DesignMatrix raw = encode(data, pr.layout);
  PenaltySet plain = build_fusion_penalties(data.factors, pr.layout, cm);
  plain.fusion_threshold = spec.fusion_threshold;

  if (spec.interactions && spec.log_mode) {
    LogExpansion ex = expand_log(raw, plain, pr.layout, cm);
    pr.design = std::move(ex.design.rows);
    pr.penalties = std::move(ex.penalties);
    pr.lift = std::move(ex.lift);
  } else {
    pr.design = project_design(raw, cm).rows;
    pr.lift = cm.null_basis;
    const DifferenceMap dm = difference_map(pr.layout, plain.groups);
    const Eigen::MatrixXd tdiff = difference_design(raw.rows, dm);
    std::vector<std::vector<int>> cols;
    const int nm = static_cast<int>(dm.d_main.rows());
    for (int g = 0; g < plain.size(); ++g) {
      std::vector<int> c{g};
      for (int r = dm.int_begin[g]; r < dm.int_begin[g + 1]; ++r) c.push_back(nm + r);
      cols.push_back(std::move(c));
    }
    plain.weights = standardization_weights(tdiff, cols, &plain.warnings);
    pr.penalties = std::move(plain);
  }
  if (!spec.weights) pr.penalties.weights.setOnes();

  if (spec.interactions) {
    const Layout mains(data.factors, false);
    pr.main_design = project_design(encode(data, mains), build_constraints(mains)).rows;
  } else {
    pr.main_design = pr.design;
  }
  pr.y = data.y;
  pr.row_start = data.row_start();
  pr.moderators = data.moderators;
  pr.validate();
  return pr;
}

}  // namespace cjmix
