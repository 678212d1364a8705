def to_fahrenheit(c):
    """Convert degrees Celsius to Fahrenheit."""
    return c * 9 / 5
