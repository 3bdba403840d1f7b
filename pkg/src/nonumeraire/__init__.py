"""Supermartingale deflators for markets without a numéraire on finite spaces."""

from .errors import InputError, NumeraireError, SolverError, StageError
from .prob import (BoundednessDiagnostic, Filtration, LazyFamily, Measure, SampleSpace,
                   boundedness_diagnostic, condition_on_event, conditional_expectation,
                   measurable_version, validate_space)
from .market import (CrashTimeProfile, Market, ParametricFamily, WealthProcess, convex_combine,
                     example_2_8_market, example_family, find_generalized_numeraire, fork_combine,
                     hull_exhaustive, hull_sample, make_wealth_process, process_crash_time, value_set)
from .solver import StaticDeflatorResult, maximal_element
from .deflator import (DeflatorProcess, VerificationReport, adapt_deflator, build_discrete_deflator,
                       local_deflator, make_deflator, market_crash_time, nupbr_check,
                       paste_deflators, verify_deflator)

__version__ = "0.1.0"

from .dyadic import independent_clock_deflator, run_dyadic  # noqa: E402
from .specfile import parse_market_file  # noqa: E402
