"""Out-of-core gradient boosting on bit-packed histogram pages.

Training data is parsed into CSR pages, quantised against per-feature
quantile cuts, bit-packed into ELLPACK pages and spilled to disk. Trees are
grown from pages streamed through a fixed device memory budget, optionally
on a gradient-based row sample compacted into a single resident page.
"""
from .booster import BoosterParams, Model, load_model, save_model, train
from .errors import BudgetExceeded, FormatError, OOCError, ParseError
from .pagestore import EllpackStore, MemoryBudget

__all__ = ["BoosterParams", "Model", "load_model", "save_model", "train", "BudgetExceeded",
           "FormatError", "OOCError", "ParseError", "EllpackStore", "MemoryBudget"]
__version__ = "0.1.0"
