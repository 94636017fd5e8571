#pragma once

// JSON fit artifact: everything convert needs, plus the tree digest that
// ties it to the tree it was fitted with.

#include <cmath>
#include <string>
#include <string_view>

#include <json.hpp>

#include "firtree/error.hpp"
#include "firtree/estimation.hpp"
#include "firtree/tree.hpp"

namespace firtree {

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (std::isfinite(m(r, c)))
        row.push_back(m(r, c));
      else
        row.push_back(nullptr);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* field) {
  if (!j.is_array()) throw ParseError(std::string("fit artifact field \"") + field + "\" must be a matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ParseError(std::string("fit artifact field \"") + field + "\" has ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (v.is_null())
        m(r, c) = std::numeric_limits<double>::quiet_NaN();
      else if (v.is_number())
        m(r, c) = v.get<double>();
      else
        throw ParseError(std::string("fit artifact field \"") + field + "\" must hold numbers");
    }
  }
  return m;
}

template <typename Enum>
Enum parse_enum(const nlohmann::json& j, const char* field, std::initializer_list<std::pair<const char*, Enum>> table) {
  if (!j.is_string()) throw ParseError(std::string("model field \"") + field + "\" must be a string");
  const auto s = j.get<std::string>();
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ParseError(std::string("unknown value '") + s + "' for model field \"" + field + "\"");
}

}  // namespace detail

inline nlohmann::json fit_to_json(const FitResult& fit) {
  nlohmann::json doc;
  doc["alpha"] = detail::matrix_to_json(fit.alpha_hat);
  doc["alpha_shape"] = {fit.alpha_hat.rows(), fit.alpha_hat.cols()};
  doc["sigma_cholesky"] = detail::matrix_to_json(fit.sigma_cholesky);
  doc["eta"] = detail::matrix_to_json(fit.eta_hat);
  doc["loglik"] = fit.log_marginal_lik;
  doc["converged"] = fit.converged;
  doc["iterations"] = fit.iterations;
  doc["se"] = detail::matrix_to_json(fit.se_alpha);
  doc["model"] = {{"trait_design", to_string(fit.spec.trait_design)},
                  {"item_design", to_string(fit.spec.item_design)},
                  {"covariance", to_string(fit.spec.covariance)},
                  {"tree", tree_to_json(fit.spec.tree)}};
  doc["tree_digest"] = fit.tree_digest;
  doc["warnings"] = fit.warnings;
  return doc;
}

inline std::string serialize_fit(const FitResult& fit) { return fit_to_json(fit).dump(2) + "\n"; }

inline FitResult fit_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("fit artifact must be a JSON object");
  for (const char* field :
       {"alpha", "alpha_shape", "sigma_cholesky", "eta", "loglik", "converged", "iterations", "model", "tree_digest"}) {
    if (!doc.contains(field)) throw ParseError(std::string("fit artifact is missing field \"") + field + "\"");
  }
  const auto& model = doc["model"];
  if (!model.is_object() || !model.contains("tree")) throw ParseError("fit artifact model must embed the tree");
  FitResult fit;
  fit.spec = ModelSpec(
      tree_from_json(model["tree"]),
      detail::parse_enum<TraitDesign>(model.value("trait_design", nlohmann::json("common")), "trait_design",
                                      {{"common", TraitDesign::Common}, {"pernode", TraitDesign::PerNode}}),
      detail::parse_enum<ItemDesign>(model.value("item_design", nlohmann::json("common")), "item_design",
                                     {{"common", ItemDesign::Common}, {"pernode", ItemDesign::PerNode}}),
      detail::parse_enum<CovarianceStructure>(model.value("covariance", nlohmann::json("scalar")), "covariance",
                                              {{"scalar", CovarianceStructure::ScalarVariance},
                                               {"diag", CovarianceStructure::Diagonal},
                                               {"unstructured", CovarianceStructure::Unstructured}}));
  fit.tree_digest = doc["tree_digest"].get<std::string>();
  fit.alpha_hat = detail::matrix_from_json(doc["alpha"], "alpha");
  fit.sigma_cholesky = detail::matrix_from_json(doc["sigma_cholesky"], "sigma_cholesky");
  fit.sigma_hat = fit.sigma_cholesky * fit.sigma_cholesky.transpose();
  fit.eta_hat = detail::matrix_from_json(doc["eta"], "eta");
  fit.se_alpha = doc.contains("se") ? detail::matrix_from_json(doc["se"], "se") : Eigen::MatrixXd();
  fit.log_marginal_lik = doc["loglik"].get<double>();
  fit.converged = doc["converged"].get<bool>();
  fit.iterations = doc["iterations"].get<int>();
  if (doc.contains("warnings")) fit.warnings = doc["warnings"].get<std::vector<std::string>>();

  if (fit.alpha_hat.cols() != static_cast<Eigen::Index>(fit.spec.item_columns()))
    throw ParseError("alpha has the wrong number of columns for the model design");
  if (fit.eta_hat.rows() > 0 && fit.eta_hat.cols() != static_cast<Eigen::Index>(fit.spec.tree.nodes()))
    throw ParseError("eta must have one column per tree node");
  if (fit.sigma_cholesky.rows() != static_cast<Eigen::Index>(fit.spec.trait_dim()))
    throw ParseError("sigma_cholesky has the wrong size for the model design");
  fit.theta = detail::pack_parameters(fit.spec, fit.alpha_hat, fit.sigma_cholesky);
  return fit;
}

inline FitResult parse_fit(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed fit artifact: ") + e.what());
  }
  try {
    return fit_from_json(doc);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed fit artifact: ") + e.what());
  }
}

}  // namespace firtree
