#pragma once

#include <cstdint>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

// Records every connect() made by code linked into this binary. The
// definition lives in connect_audit.cpp and shadows the libc symbol.
namespace audit {

struct Connection {
  std::thread::id thread;
  int family = 0;
  std::string address;  // numeric host
  std::uint16_t port = 0;
};

std::vector<Connection> connections();
void reset();

}  // namespace audit
