"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The Cython extension (``_native``) is selected at import when it built
successfully; set BODYGRAPH_PURE=1 to force the numpy fallback. Both
backends implement the same contracts and agree to float tolerance
(``tests/test_kernels.py``); ``bodygraph bench-kernels`` compares speed.
"""

import os

from . import _numpy

if os.environ.get("BODYGRAPH_PURE", "0") == "1":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        _impl = _numpy
        BACKEND = "numpy"

project_radtan = _impl.project_radtan
project_equidistant = _impl.project_equidistant
fk_chain = _impl.fk_chain
fk_rest_jacobian = _impl.fk_rest_jacobian
landmark_normal_equations = _impl.landmark_normal_equations
schur_reduce = _impl.schur_reduce
landmark_backsub = _impl.landmark_backsub

MIN_DEPTH = _numpy.MIN_DEPTH
