# helpers/components.py
from typing import List, Tuple

import numpy as np
from skimage import measure


def label_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """8-connected labelling of a boolean mask; background is 0."""
    labels, count = measure.label(np.asarray(mask, dtype=np.uint8), connectivity=2, return_num=True)
    return labels, int(count)


def component_regions(mask: np.ndarray) -> List:
    """regionprops of the 8-connected components, ordered by label."""
    labels, _ = label_components(mask)
    return measure.regionprops(labels)
