#ifndef TRL_COMMON_HPP
#define TRL_COMMON_HPP

#include <Eigen/Dense>

namespace trl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kPi = 3.14159265358979323846;

}  // namespace trl

#endif
