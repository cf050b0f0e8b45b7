def outer(n):
    def inner(m):
        return m + n
    r = inner(n)
    return r
