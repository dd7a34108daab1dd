# Tests for the AUIF fusion toolkit
