"""relaytune: migrate service-model capability into small local models.

The pipeline iterates synthesize -> curate -> fine-tune -> infer -> judge ->
decide until the tuned local model clears its quality gates, and models the
long-run deployment economics of making the switch.
"""

__version__ = "0.1.0"
