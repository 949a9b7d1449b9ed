#include <cstdio>

int main() {
    std::puts("ferformer: cli not wired yet");
    return 2;
}
