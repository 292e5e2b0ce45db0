#pragma once

// Shared math types, frame conventions and error types.
//
// Frames are NED (x north, y east, z down). Poses are [x y z roll pitch yaw],
// body velocities [u v w p q r] in SNAME notation.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mariner {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline constexpr double kPi = std::numbers::pi;

/// Base for all recoverable errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data (files, configs, frames) did not match the expected format.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A precondition on an argument was violated.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * kPi);
    if (w <= -kPi) w += 2.0 * kPi;
    return w;
}

/// Skew-symmetric cross-product matrix: skew(a) * b == a.cross(b).
inline Mat3 skew(const Vec3& a) {
    Mat3 s;
    s << 0.0, -a.z(), a.y(),
         a.z(), 0.0, -a.x(),
         -a.y(), a.x(), 0.0;
    return s;
}

/// Body-to-NED rotation for zyx Euler angles (roll, pitch, yaw).
inline Mat3 rotation_zyx(double phi, double theta, double psi) {
    const double cphi = std::cos(phi), sphi = std::sin(phi);
    const double cth = std::cos(theta), sth = std::sin(theta);
    const double cpsi = std::cos(psi), spsi = std::sin(psi);
    Mat3 r;
    r << cpsi * cth, -spsi * cphi + cpsi * sth * sphi, spsi * sphi + cpsi * cphi * sth,
         spsi * cth, cpsi * cphi + sphi * sth * spsi, -cpsi * sphi + sth * spsi * cphi,
         -sth, cth * sphi, cth * cphi;
    return r;
}

inline Mat3 rotation_of(const Vec6& pose) { return rotation_zyx(pose[3], pose[4], pose[5]); }

/// Rigid transform described by a pose 6-vector.
struct Transform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Transform from_pose(const Vec6& pose) {
        return {rotation_of(pose), pose.head<3>()};
    }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
    Vec3 rotate(const Vec3& v) const { return rotation * v; }
    Vec3 inverse_apply(const Vec3& p) const { return rotation.transpose() * (p - translation); }

    Transform compose(const Transform& child) const {
        return {rotation * child.rotation, rotation * child.translation + translation};
    }
};

/// Ground-truth tag attached to terrain and props. class_id 0 means unlabeled.
struct SemanticLabel {
    int class_id = 0;
    std::int64_t instance_id = 0;

    friend bool operator==(const SemanticLabel&, const SemanticLabel&) = default;
};

}  // namespace mariner
