"""Feature-collision data poisoning against pool-based active transfer learning."""

__version__ = "0.1.0"
