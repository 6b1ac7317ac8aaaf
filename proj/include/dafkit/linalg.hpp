#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace dafkit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using IMat2 = Eigen::Matrix2i;

inline constexpr double pi = std::numbers::pi;

/// Angle between unoriented lines, in [0, pi/2].
inline double line_angle(const Vec3& a, const Vec3& b) {
    double c = std::abs(a.dot(b)) / (a.norm() * b.norm());
    double s = a.cross(b).norm() / (a.norm() * b.norm());
    return std::atan2(s, c);
}

/// Angle between oriented vectors, in [0, pi].
inline double vector_angle(const Vec3& a, const Vec3& b) {
    return std::atan2(a.cross(b).norm(), a.dot(b));
}

/// Angle between a line and a plane given by its normal, in [0, pi/2].
inline double line_plane_angle(const Vec3& v, const Vec3& normal) {
    return pi / 2 - line_angle(v, normal);
}

inline Vec3 unit(const Vec3& v) { return v / v.norm(); }

/// Flip b so it points along a.
inline Vec3 align(const Vec3& b, const Vec3& a) { return b.dot(a) < 0 ? Vec3(-b) : b; }

inline Mat3 block_diag(const Mat2& a, double c) {
    Mat3 m = Mat3::Zero();
    m.topLeftCorner<2, 2>() = a;
    m(2, 2) = c;
    return m;
}

inline Mat2 to_real(const IMat2& a) { return a.cast<double>(); }

/// Integer matrix power, negative exponents allowed for unimodular input.
inline Mat2 power(const Mat2& a, int k) {
    Mat2 base = k >= 0 ? a : Mat2(a.inverse());
    Mat2 r = Mat2::Identity();
    for (int i = 0; i < std::abs(k); ++i) r = base * r;
    return r;
}

/// Spectral norm of a 3x3 matrix.
inline double op_norm(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m);
    return svd.singularValues()(0);
}

} // namespace dafkit
