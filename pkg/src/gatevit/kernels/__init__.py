"""Kernel backend selection.

The compiled Cython core is used when it imported cleanly; otherwise the
numpy reference implementations take over. ``GATEVIT_NO_EXT=1`` forces the
numpy backend (used by the benchmark to compare the two).
"""

import os

from . import reference

if os.environ.get("GATEVIT_NO_EXT", "") not in ("", "0"):
    impl = reference
    BACKEND = "numpy"
else:
    try:
        from . import _core as impl
        BACKEND = "cython"
    except ImportError:
        impl = reference
        BACKEND = "numpy"

gelu_fwd = impl.gelu_fwd
gelu_bwd = impl.gelu_bwd
sigmoid_fwd = impl.sigmoid_fwd
sigmoid_bwd = impl.sigmoid_bwd
softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
layernorm_fwd = impl.layernorm_fwd
layernorm_bwd = impl.layernorm_bwd
adamw_update = impl.adamw_update
