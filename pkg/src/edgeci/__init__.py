"""Agent-based toolkit for supervising AI models on edge telemetry streams.

Components talk only through a message bus: ingestion sources publish
observations, the inference agent answers with predictions and OK/Non-OK
flags, the GenAI agent explains deviations, the designer trains and
deploys models, and the gateway serves the operator console.
"""

__version__ = "0.1.0"
