"""Power flow by germ-embedded power series, with STATCOM and UPFC models."""
from .errors import (CaseParseError, CaseValidationError, ConfigurationError, FFHEError, InvalidGermError,
                     SingularElementError, SingularSystemError)
from .ffhe import Germ, SolveOptions, SolveReport, assemble_system, compute_mismatch, make_germ, solve_ffhe
from .netmodel import Branch, Bus, NetworkCase, build_ybus, builtin_case, load_case, parse_case
from .nr import NROptions, nr_seed, nr_solve
from .pseries import BACKEND
from .statcom import StatcomSpec
from .upfc import UpfcSpec

__version__ = "0.1.0"
