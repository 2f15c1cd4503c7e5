"""Missing-modality prompt tuning with modal-contextualized prompts, on a small numpy autodiff core."""

__version__ = "0.1.0"
