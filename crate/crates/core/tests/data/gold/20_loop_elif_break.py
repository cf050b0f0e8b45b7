def classify(xs):
    i = 0
    kind = None
    while i < len(xs):
        x = xs[i]
        if x > 0:
            kind = "pos"
        elif x < 0:
            kind = "neg"
            break
        i += 1
    return kind
