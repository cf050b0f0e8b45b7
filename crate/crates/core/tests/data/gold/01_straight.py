def area(w, h):
    a = w * h
    b = a + 1
    return b
