#pragma once

// 6-DoF pose algebra on (translation, Euler angles). Rotations use the
// intrinsic Z-Y-X (yaw-pitch-roll) convention; composition goes through
// rotation matrices internally and converts back to Euler angles only at the
// boundary, so chained compositions do not accumulate Euler nonlinearity.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>

namespace pgslam {

struct GimbalLockError : std::domain_error {
    using std::domain_error::domain_error;
};

// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
    a = std::fmod(a + M_PI, 2.0 * M_PI);
    if (a <= 0.0) a += 2.0 * M_PI;
    return a - M_PI;
}

inline Eigen::Vector3d wrap_angles(const Eigen::Vector3d& r) {
    return {wrap_angle(r.x()), wrap_angle(r.y()), wrap_angle(r.z())};
}

// R = Rz(yaw) * Ry(pitch) * Rx(roll), r = (roll, pitch, yaw).
inline Eigen::Matrix3d euler_to_matrix(const Eigen::Vector3d& r) {
    return (Eigen::AngleAxisd(r.z(), Eigen::Vector3d::UnitZ()) *
            Eigen::AngleAxisd(r.y(), Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(r.x(), Eigen::Vector3d::UnitX()))
        .toRotationMatrix();
}

// Inverse of euler_to_matrix. Throws GimbalLockError when pitch is within
// 1e-6 rad of +-pi/2, where roll and yaw become indistinguishable.
inline Eigen::Vector3d matrix_to_euler(const Eigen::Matrix3d& m) {
    const double sp = std::clamp(-m(2, 0), -1.0, 1.0);
    const double pitch = std::asin(sp);
    if (std::abs(pitch) > M_PI / 2.0 - 1e-6)
        throw GimbalLockError("matrix_to_euler: pitch within 1e-6 of +-pi/2");
    const double roll = std::atan2(m(2, 1), m(2, 2));
    const double yaw = std::atan2(m(1, 0), m(0, 0));
    return {roll, pitch, yaw};
}

// A 6-DoF pose: translation in meters, Euler angles (roll, pitch, yaw) in
// radians, each wrapped to (-pi, pi].
struct Pose6 {
    Eigen::Vector3d t{0.0, 0.0, 0.0};
    Eigen::Vector3d r{0.0, 0.0, 0.0};

    Pose6() = default;
    Pose6(const Eigen::Vector3d& t_, const Eigen::Vector3d& r_) : t(t_), r(wrap_angles(r_)) {}
    Pose6(double tx, double ty, double tz, double rx, double ry, double rz)
        : t(tx, ty, tz), r(wrap_angles({rx, ry, rz})) {}

    static Pose6 identity() { return Pose6(); }

    bool finite() const { return t.allFinite() && r.allFinite(); }

    Eigen::Matrix3d rotation() const { return euler_to_matrix(r); }

    // Flattened (tx, ty, tz, roll, pitch, yaw).
    Eigen::Matrix<double, 6, 1> vec() const {
        Eigen::Matrix<double, 6, 1> v;
        v << t, r;
        return v;
    }
    static Pose6 from_vec(const Eigen::Matrix<double, 6, 1>& v) {
        return Pose6(v.head<3>(), v.tail<3>());
    }
};

inline void require_finite(const Pose6& p, const char* who) {
    if (!p.finite()) throw std::invalid_argument(std::string(who) + ": non-finite pose");
}

// a (+) b: the pose of b's frame expressed in a's parent frame.
inline Pose6 compose(const Pose6& a, const Pose6& b) {
    require_finite(a, "compose");
    require_finite(b, "compose");
    const Eigen::Matrix3d Ra = a.rotation();
    Pose6 out;
    out.t = a.t + Ra * b.t;
    out.r = matrix_to_euler(Ra * b.rotation());
    return out;
}

inline Pose6 inverse(const Pose6& p) {
    require_finite(p, "inverse");
    const Eigen::Matrix3d Rt = p.rotation().transpose();
    Pose6 out;
    out.t = -(Rt * p.t);
    out.r = matrix_to_euler(Rt);
    return out;
}

// b expressed in a's frame: inverse(a) (+) b.
inline Pose6 relative(const Pose6& a, const Pose6& b) {
    return compose(inverse(a), b);
}

// Geodesic rotation angle of a rotation matrix, in radians.
inline double rotation_angle(const Eigen::Matrix3d& m) {
    return std::acos(std::clamp((m.trace() - 1.0) / 2.0, -1.0, 1.0));
}

// Roundtrip through matrix form; identity (up to wrapping) away from gimbal lock.
inline Eigen::Vector3d euler_matrix_roundtrip(const Eigen::Vector3d& r) {
    return matrix_to_euler(euler_to_matrix(r));
}

}  // namespace pgslam
