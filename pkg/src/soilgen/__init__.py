"""Soil reflectance generation from text property descriptions.

Main entry points:

- :class:`soilgen.padding.SpectraPadder` fills unmeasured wavebands.
- :class:`soilgen.diffusion.SOGM` generates dry spectra from property sentences.
- :class:`soilgen.wet.WetSoilModel` predicts wet spectra from dry spectra and moisture.
- :mod:`soilgen.radiometry` integrates spectra against camera/source tables and renders scenes.
"""

__version__ = "0.1.0"

from .diffusion import SOGM, DiffusionSchedule, GenerationRequest
from .padding import SpectraPadder
from .spectra import Spectrum
from .wet import WetSoilModel

__all__ = ["SOGM", "DiffusionSchedule", "GenerationRequest", "SpectraPadder", "Spectrum", "WetSoilModel"]
