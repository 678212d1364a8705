def show(x):
    return f"<{x}>"
