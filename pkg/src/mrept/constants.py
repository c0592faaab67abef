"""Physical constants and default acquisition parameters (SI units)."""

import math

#: Magnetic permeability of free space [H/m].
MU0 = 4.0e-7 * math.pi

#: Permittivity of free space [F/m], value used for relative permittivities.
EPS_VACUUM = 8.85e-12

#: Larmor frequency of a 3 T scanner [Hz].
LARMOR_3T_HZ = 128.0e6

#: Default angular frequency [rad/s].
OMEGA_3T = 2.0 * math.pi * LARMOR_3T_HZ
