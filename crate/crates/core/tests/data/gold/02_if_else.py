def sign(a):
    if a > 0:
        x = a
    else:
        x = -a
    return x
