"""Field of a right-angle metal wedge swept across its shadow boundaries.

The diffraction coefficient alone jumps where the geometric-optics field
switches on or off; the sum of both stays continuous. Prints |D|, the
geometric-optics field and the total field along an arc around the edge,
then the jump of each right at the two boundaries.
"""
import numpy as np

from emtwin.oracle import C0, Material, utd_coeffs
from emtwin.polarization import DiffractionAngles

PEC = Material(99, "pec", 1.0, 1e9, 0.0, 1.0)
FC = 3.5e9
K0 = 2 * np.pi * FC / C0
SP, S = 4.0, 2.0              # source and observer distance from the edge
PHIP = np.pi / 3              # source angle from face 0


def parts(phi):
    """(geometric-optics field, diffracted field, D_s) for the soft polarization."""
    src = SP * np.array([np.cos(PHIP), np.sin(PHIP)])
    img = SP * np.array([np.cos(PHIP), -np.sin(PHIP)])
    rx = S * np.array([np.cos(phi), np.sin(phi)])
    go = 0j
    if phi < np.pi + PHIP:
        r = np.linalg.norm(src - rx)
        go += np.exp(-1j * K0 * r) / r
    if phi < np.pi - PHIP:
        r = np.linalg.norm(img - rx)
        go -= np.exp(-1j * K0 * r) / r
    ang = DiffractionAngles(np.pi / 2, np.pi / 2, PHIP, phi, 1.5 * np.pi, 0.0, 0.0)
    d = utd_coeffs(PEC, ang, SP, S, FC)[0, 0]
    diffr = np.exp(-1j * K0 * SP) / SP * d * np.sqrt(SP / (S * (S + SP))) * np.exp(-1j * K0 * S)
    return go, diffr, d


def main():
    print(f"reflection boundary {np.pi - PHIP:.3f} rad, incident boundary {np.pi + PHIP:.3f} rad")
    print("  phi    |D_s|   |GO|   |total|")
    for phi in np.arange(1.6, 4.65, 0.15):
        go, diffr, d = parts(phi)
        print(f"{phi:5.2f}  {abs(d):6.3f}  {abs(go):5.3f}  {abs(go + diffr):6.3f}")
    for name, b in (("reflection", np.pi - PHIP), ("incident", np.pi + PHIP)):
        lo, hi = parts(b - 1e-7), parts(b + 1e-7)
        tot = abs((hi[0] + hi[1]) - (lo[0] + lo[1])) / abs(lo[0] + lo[1])
        print(f"{name} boundary: GO jump {abs(hi[0] - lo[0]):.3f}, D jump {abs(hi[2] - lo[2]):.3f}, "
              f"relative total-field jump {tot:.1e}")


if __name__ == "__main__":
    main()
