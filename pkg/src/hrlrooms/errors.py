class ContractViolation(RuntimeError):
    """An operation was called outside its precondition.

    Raised instead of silently repairing the input, so the training loop can
    abort and record the offending step.
    """
