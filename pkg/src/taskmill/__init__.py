"""taskmill: manufacture execution-validated coding-task training records.

The pipeline filters raw documents with a relevance classifier, structures
tasks through LLM endpoints, validates candidate solutions by sandboxed
execution, expands the task pool with crossover/mutation operators, and
deduplicates and decontaminates the result.
"""

__version__ = "0.1.0"
