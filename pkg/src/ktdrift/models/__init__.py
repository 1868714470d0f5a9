"""Knowledge-tracing model families."""

FAMILIES = ("BKT", "PFA", "DKT", "SAKT-KC", "SAKT-E")
DEEP_FAMILIES = ("DKT", "SAKT-KC", "SAKT-E")
