"""LP serialisation, external solver invocation and exact small-instance oracles."""
