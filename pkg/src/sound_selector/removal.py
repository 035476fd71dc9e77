"""Sound removal: suppress the selected classes instead of extracting them.

Two schemes: a network trained directly on removal references (model kind
``removal-direct``, trained with :func:`sound_selector.train.fit`), or
indirect removal that subtracts a Sound Selector estimate from the mixture.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .nets import forward
from .signal import check_class_vector, mix_reference


def removal_reference(mixture, stems, o):
    """``mixture - sum_n o_n stems_n``: the mixture with the selected classes taken out."""
    mixture = np.asarray(mixture, dtype=np.float64)
    stems = np.asarray(stems, dtype=np.float64)
    if stems.ndim != 2 or stems.shape[1] != mixture.shape[0]:
        raise InvalidArgumentError(f"stems shape {stems.shape} does not match mixture length {mixture.shape[0]}")
    return mixture - mix_reference(stems, o)


def remove_indirect(y, o, selector):
    """Mixture minus the selector's estimate for the classes in ``o``."""
    y = np.asarray(y, dtype=np.float64)
    return y - forward(y, check_class_vector(o), selector)


def remove_direct(y, o, removal_model):
    """Run a network trained on removal references."""
    return forward(y, o, removal_model)
