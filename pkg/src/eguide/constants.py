"""Physical constants and unit conversions (SI internally, CODATA values)."""

import math

# CODATA 2018 exact / recommended values
ELEMENTARY_CHARGE = 1.602176634e-19   # C
ELECTRON_MASS = 9.1093837015e-31      # kg
HBAR = 1.054571817e-34                # J s

EV = ELEMENTARY_CHARGE                # J per eV

# electron charge is negative; guides confine at field nulls so only Q^2
# enters the pseudopotential, but trajectory forces need the sign
ELECTRON_CHARGE = -ELEMENTARY_CHARGE

UM = 1e-6
MM = 1e-3
GHZ = 2 * math.pi * 1e9   # GHz -> rad/s
MHZ = 2 * math.pi * 1e6


def ev_to_joule(e):
    return e * EV


def joule_to_ev(e):
    return e / EV


def kinetic_speed(e_kin_ev, mass=ELECTRON_MASS):
    """Speed of a particle with kinetic energy e_kin_ev (non-relativistic)."""
    return math.sqrt(2.0 * e_kin_ev * EV / mass)
