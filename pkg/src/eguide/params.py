"""Drive and particle parameter containers shared across modules."""

from dataclasses import dataclass

from . import constants as cn
from .errors import ConfigError


@dataclass(frozen=True)
class DriveParams:
    """Microwave drive: angular frequency omega [rad/s], amplitude v0 [V], phase [rad]."""

    omega: float
    v0: float
    phase: float = 0.0

    def __post_init__(self):
        if self.omega <= 0:
            raise ConfigError("drive omega must be > 0")
        if self.v0 < 0:
            raise ConfigError("drive amplitude v0 must be >= 0")

    @property
    def period(self):
        return 2.0 * 3.141592653589793 / self.omega


@dataclass(frozen=True)
class ParticleSpecies:
    """Charged particle: charge [C] (signed), mass [kg]."""

    charge: float
    mass: float

    def __post_init__(self):
        if self.mass <= 0:
            raise ConfigError("particle mass must be > 0")


ELECTRON = ParticleSpecies(charge=cn.ELECTRON_CHARGE, mass=cn.ELECTRON_MASS)
