"""Novel class discovery for point-cloud semantic segmentation at desk scale."""

__version__ = "0.1.0"

from .data_model import LabeledCloud, NcdTaskSpec, label_guard  # noqa: E402
from .errors import NcdError  # noqa: E402

__all__ = ["LabeledCloud", "NcdTaskSpec", "NcdError", "label_guard", "__version__"]
