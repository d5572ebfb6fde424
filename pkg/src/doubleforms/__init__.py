"""Double forms on flat domains."""
