#pragma once

namespace mmcp {

// Oriented 3D box: center (x,y,z), dimensions (h,w,l), yaw theta in
// [-pi, pi). l is the extent along the heading axis, w across it. BEV
// footprint is the rotated (l, w) rectangle in the x-y plane.
struct ObjectBox {
    double x = 0, y = 0, z = 0;
    double h = 0, w = 0, l = 0;
    double theta = 0;
    int cls = 0;
};

// BEV grid geometry: square cells, grid centered on the owning agent.
// Row index i runs along +y, column index j along +x.
struct BevGrid {
    int h = 32, w = 32;
    double cell = 1.6;  // meters per cell

    double cell_cx(int j) const { return (j - w / 2 + 0.5) * cell; }
    double cell_cy(int i) const { return (i - h / 2 + 0.5) * cell; }
    // Cell containing a point, or false if out of range.
    bool locate(double x, double y, int& i, int& j) const {
        const double fx = x / cell + w / 2.0;
        const double fy = y / cell + h / 2.0;
        if (fx < 0 || fy < 0 || fx >= w || fy >= h) return false;
        j = static_cast<int>(fx);
        i = static_cast<int>(fy);
        return true;
    }
    double half_extent_x() const { return w * cell / 2.0; }
    double half_extent_y() const { return h * cell / 2.0; }
};

double wrap_angle(double theta);  // into [-pi, pi)

}  // namespace mmcp
