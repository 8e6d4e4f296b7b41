"""Timestamped dataflow graphs: calculators wired by streams, run by a priority scheduler."""
from . import stdcalcs  # noqa: F401  registers the standard calculators
from .calculator import (
    Calculator,
    CalculatorContext,
    CalculatorContract,
    InputPolicy,
    InputSpec,
    NodeShape,
    SameAs,
    register,
    registry,
)
from .config import load_graph, parse, serialize, validate
from .core import DONE, TS_MAX, TS_MIN, UNSET, Detection, Detections, Packet, make_packet
from .errors import *  # noqa: F401,F403
from .scheduler import GraphRun, RunOptions, RunResult, run
from .tracer import critical_path, export, load_trace, summarize

__version__ = "0.1.0"
