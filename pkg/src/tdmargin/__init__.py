"""Coupled transmission/distribution power flow and voltage-stability margins.

Modules map onto the problem's layers: ``netmodel`` (types and validation),
``zipload`` (voltage-dependent loads), ``tpf`` (transmission Newton solver),
``dpf`` (radial feeder sweep solver), ``cosim`` (boundary-bus coupling),
``margin`` (continuation trace and nose search), ``cvr`` (tap-reduction
scenarios and impedance analytics) and ``cli`` (case files and commands).
"""

__version__ = "0.1.0"

from .netmodel import CoupledSystem, validate_network  # noqa: F401
from .zipload import ZipLoad, eval_zip  # noqa: F401
