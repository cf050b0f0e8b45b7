class Counter:
    def __init__(self, start):
        self.count = start

    def bump(self, step):
        self.count += step
        return self.count
