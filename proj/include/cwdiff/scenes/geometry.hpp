#pragma once

#include <cmath>

namespace cwdiff {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalize(Vec3 a) { return (1.0 / norm(a)) * a; }

/// Orthonormal tangent frame around a unit normal (branchless construction
/// of Duff et al.); local (x, y, z) maps to tangent, bitangent, normal.
struct Frame {
    Vec3 t, b, n;

    static Frame around(Vec3 n) {
        const double sign = std::copysign(1.0, n.z);
        const double a = -1.0 / (sign + n.z);
        const double c = n.x * n.y * a;
        return {{1.0 + sign * n.x * n.x * a, sign * c, -sign * n.x}, {c, sign + n.y * n.y * a, -n.y}, n};
    }

    Vec3 to_world(Vec3 l) const { return l.x * t + l.y * b + l.z * n; }
    Vec3 to_local(Vec3 w) const { return {dot(w, t), dot(w, b), dot(w, n)}; }
};

}  // namespace cwdiff
