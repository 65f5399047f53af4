"""Render a few virtual-camera crops and compare the horizon to its analytic row.

    python3 demos/horizon_geometry.py
"""
import math

from calibfw import camera_geometry as cg
from calibfw import pano_pipeline as pp


def main():
    pano = pp.synth_panorama(seed=2, style="outdoor-like", height=512)
    size = 128
    print(f"{'f_px':>6} {'pitch':>6} {'bp':>7} {'analytic row':>13} {'measured row':>13}")
    for f in (60, 150, 300):
        for deg in (-5, -15, -30):
            bp = cg.horizon_midpoint(f, math.radians(deg), size)
            if abs(bp) >= 1:
                print(f"{f:6d} {deg:6d} {bp:7.3f} {'out of frame':>13}")
                continue
            crop = pp.render_crop(pano, pp.CropSpec.from_degrees(f, deg, 0, size=size))
            print(f"{f:6d} {deg:6d} {bp:7.3f} {cg.units_to_row(bp, size):13.2f} {pp.measure_horizon_row(crop):13.2f}")


if __name__ == "__main__":
    main()
