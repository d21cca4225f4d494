"""Custom types used for type hinting."""

from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch


FloatArray = npt.NDArray[np.floating[Any]]

IndexArray = npt.NDArray[np.int64]

ArrayOrTensor = Union[npt.NDArray[Any], torch.Tensor]

Point = Tuple[float, float]

Corners = Sequence[Point]

JsonDict = Dict[str, Any]
