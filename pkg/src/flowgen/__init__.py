"""Natural-language workflow generation through a Python IR and BPMN 2.0."""

__version__ = "0.1.0"
