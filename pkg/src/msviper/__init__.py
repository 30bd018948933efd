"""Decision-tree distillation of navigation experts across curriculum scenarios, with
direct tree edits that repair freezing, oscillation and vibration."""

__version__ = "0.1.0"
