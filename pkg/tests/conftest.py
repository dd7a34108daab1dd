# Shared pytest configuration for the AUIF test suite


def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line(
        "markers", "slow: desk-scale training and full gradient runs (deselect with '-m \"not slow\"')"
    )
