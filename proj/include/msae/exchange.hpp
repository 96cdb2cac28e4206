#pragma once

// Activation-exchange protocol for out-of-process hosts.
//
// Every message is one JSON object on a single line. Messages that carry a
// float block declare its length in "bytes" and are followed immediately by
// that many bytes of little-endian f32 data.
//
//   client -> server             server -> client
//   HELLO                        HELLO {d_l, T, vocab}
//   RUN {input_ref}              ACT {rows, cols, ranges, bytes} + block
//   COMPLETE {rows, cols, bytes} LOGITS {n, bytes} + block
//   VJP {v_c, v_b, rows, cols,   GRAD {rows, cols, bytes} + block
//        bytes} + block
//   BYE                          (connection closed)
//   any failure                  ERROR {message}

#include <fcntl.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/binary_io.hpp"
#include "msae/error.hpp"
#include "msae/host.hpp"
#include "msae/image.hpp"
#include "msae/toy_world.hpp"

namespace msae::exchange {

using nlohmann::json;

// Bidirectional byte stream over a pair of file descriptors (the same fd for
// sockets). Owns the descriptors.
class FdChannel {
 public:
  FdChannel(int in_fd, int out_fd) : in_(in_fd), out_(out_fd) {}
  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;
  ~FdChannel() {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0 && out_ != in_) ::close(out_);
  }

  void write_all(const void* data, std::size_t n) {
    const char* p = static_cast<const char*>(data);
    while (n > 0) {
      const ssize_t w = ::write(out_, p, n);
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) throw ClientError(std::string("exchange write failed: ") + std::strerror(errno));
      p += w;
      n -= static_cast<std::size_t>(w);
    }
  }

  // Returns false on clean EOF before any byte.
  bool read_line(std::string& line) {
    line.clear();
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return true;
      }
      if (!fill()) {
        if (buf_.empty()) return false;
        throw ClientError("exchange: connection closed mid-message");
      }
    }
  }

  std::string read_exact(std::size_t n) {
    while (buf_.size() < n)
      if (!fill()) throw ClientError("exchange: connection closed inside a float block");
    std::string out = buf_.substr(0, n);
    buf_.erase(0, n);
    return out;
  }

 private:
  bool fill() {
    char tmp[65536];
    for (;;) {
      const ssize_t r = ::read(in_, tmp, sizeof tmp);
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw ClientError(std::string("exchange read failed: ") + std::strerror(errno));
      if (r == 0) return false;
      buf_.append(tmp, static_cast<std::size_t>(r));
      return true;
    }
  }

  int in_;
  int out_;
  std::string buf_;
};

// ---- framing ---------------------------------------------------------------------

inline std::string pack_f32(std::span<const double> values) {
  io::ByteWriter w;
  for (double v : values) w.put<float>(static_cast<float>(v));
  return {w.buffer().begin(), w.buffer().end()};
}

inline std::string pack_f32(std::span<const float> values) {
  io::ByteWriter w;
  w.put_all<float>(values);
  return {w.buffer().begin(), w.buffer().end()};
}

inline std::vector<float> unpack_f32(const std::string& bytes) {
  if (bytes.size() % 4 != 0) throw ParseError("exchange: float block length not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  io::ByteReader r(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  r.get_all<float>(std::span(out));
  return out;
}

struct Message {
  json header;
  std::string block;  // raw payload bytes, empty if none
};

inline void send(FdChannel& ch, json header, const std::string& block = {}) {
  if (!block.empty() || header.contains("bytes")) header["bytes"] = block.size();
  const std::string line = header.dump() + "\n";
  ch.write_all(line.data(), line.size());
  if (!block.empty()) ch.write_all(block.data(), block.size());
}

inline std::optional<Message> receive(FdChannel& ch) {
  std::string line;
  if (!ch.read_line(line)) return std::nullopt;
  Message m;
  try {
    m.header = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(std::string("exchange: malformed header line: ") + e.what());
  }
  if (!m.header.is_object() || !m.header.contains("type")) throw ParseError("exchange: header without type");
  if (m.header.contains("bytes")) m.block = ch.read_exact(m.header.at("bytes").get<std::size_t>());
  return m;
}

inline Matrix<double> block_matrix(const Message& m) {
  const auto rows = m.header.at("rows").get<std::size_t>();
  const auto cols = m.header.at("cols").get<std::size_t>();
  const auto f = unpack_f32(m.block);
  if (f.size() != rows * cols) throw ParseError("exchange: block size does not match rows x cols");
  return Matrix<double>(rows, cols, std::vector<double>(f.begin(), f.end()));
}

// ---- server -------------------------------------------------------------------------

using InputResolver = std::function<HostInput(const std::string& input_ref)>;

// input_ref for toy hosts: {"image": "<png path>", "text": "<prompt words>"}
// or {"text_ids": [..]}; both parts optional.
inline HostInput resolve_toy_input(const std::string& ref) {
  HostInput in;
  in.ref = ref;
  json j;
  try {
    j = json::parse(ref);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("input_ref is not JSON: ") + e.what());
  }
  if (j.contains("image")) in.image = load_png(j.at("image").get<std::string>());
  if (j.contains("text")) in.text = toy::tokenize(j.at("text").get<std::string>());
  if (j.contains("text_ids")) in.text = j.at("text_ids").get<std::vector<std::uint32_t>>();
  return in;
}

inline json ranges_json(const std::vector<TokenRange>& ranges) {
  json out = json::array();
  for (const auto& r : ranges) out.push_back({{"label", r.label}, {"begin", r.begin}, {"end", r.end}});
  return out;
}

// Answer requests until BYE or EOF. `image_tokens` is reported in HELLO as T.
inline void serve(const HostModel& host, FdChannel& ch, const InputResolver& resolve, std::size_t image_tokens) {
  for (;;) {
    std::optional<Message> m;
    try {
      m = receive(ch);
    } catch (const Error& e) {
      send(ch, {{"type", "ERROR"}, {"message", e.what()}});
      return;
    }
    if (!m) return;
    const auto type = m->header.at("type").get<std::string>();
    try {
      if (type == "HELLO") {
        send(ch, {{"type", "HELLO"}, {"d_l", host.d_model()}, {"T", image_tokens}, {"vocab", host.vocab_size()}});
      } else if (type == "RUN") {
        const auto in = resolve(m->header.at("input_ref").get<std::string>());
        const auto x = host.run(in);
        send(ch,
             {{"type", "ACT"}, {"rows", x.rows()}, {"cols", x.cols()}, {"ranges", ranges_json(host.token_ranges(in))}},
             pack_f32(std::span<const float>(x.data())));
      } else if (type == "COMPLETE") {
        const auto u = host.complete(block_matrix(*m));
        send(ch, {{"type", "LOGITS"}, {"n", u.size()}}, pack_f32(std::span<const double>(u)));
      } else if (type == "VJP") {
        const auto g = host.vjp(block_matrix(*m), m->header.at("v_c").get<std::uint32_t>(),
                                m->header.at("v_b").get<std::uint32_t>());
        send(ch, {{"type", "GRAD"}, {"rows", g.rows()}, {"cols", g.cols()}}, pack_f32(std::span<const double>(g.data())));
      } else if (type == "BYE") {
        return;
      } else {
        send(ch, {{"type", "ERROR"}, {"message", "unknown message type " + type}});
      }
    } catch (const std::exception& e) {
      send(ch, {{"type", "ERROR"}, {"message", e.what()}});
    }
  }
}

// ---- transports ---------------------------------------------------------------------------

// Child process speaking the protocol on its stdin/stdout.
class Subprocess {
 public:
  explicit Subprocess(const std::vector<std::string>& argv) {
    require(!argv.empty(), "exchange: empty command");
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) throw ClientError("exchange: pipe() failed");
    pid_ = ::fork();
    if (pid_ < 0) throw ClientError("exchange: fork() failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      std::vector<char*> args;
      for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
      args.push_back(nullptr);
      ::execvp(args[0], args.data());
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    channel_ = std::make_unique<FdChannel>(from_child[0], to_child[1]);
  }
  Subprocess(const Subprocess&) = delete;
  Subprocess& operator=(const Subprocess&) = delete;
  ~Subprocess() {
    if (channel_) {
      try {
        send(*channel_, {{"type", "BYE"}});
      } catch (...) {
      }
      channel_.reset();
    }
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }
  FdChannel& channel() { return *channel_; }

 private:
  pid_t pid_ = -1;
  std::unique_ptr<FdChannel> channel_;
};

inline sockaddr_un unix_address(const std::string& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) throw InvalidArgument("socket path too long: " + path);
  std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
  return addr;
}

inline std::unique_ptr<FdChannel> connect_unix(const std::string& path) {
  const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd < 0) throw ClientError("exchange: socket() failed");
  auto addr = unix_address(path);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw ClientError("exchange: cannot connect to " + path + ": " + std::strerror(errno));
  }
  return std::make_unique<FdChannel>(fd, fd);
}

// Listening socket; serves connections one at a time until `max_connections`
// have been handled (0 = forever).
inline void listen_unix(const std::string& path, const HostModel& host, const InputResolver& resolve,
                        std::size_t image_tokens, std::size_t max_connections = 0,
                        const std::function<void()>& on_ready = {}) {
  const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd < 0) throw ClientError("exchange: socket() failed");
  ::unlink(path.c_str());
  auto addr = unix_address(path);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 4) != 0) {
    ::close(fd);
    throw ClientError("exchange: cannot listen on " + path + ": " + std::strerror(errno));
  }
  if (on_ready) on_ready();
  for (std::size_t served = 0; max_connections == 0 || served < max_connections; ++served) {
    const int c = ::accept(fd, nullptr, nullptr);
    if (c < 0) {
      if (errno == EINTR) continue;
      break;
    }
    FdChannel ch(c, c);
    serve(host, ch, resolve, image_tokens);
  }
  ::close(fd);
  ::unlink(path.c_str());
}

// ---- client ---------------------------------------------------------------------------------

// HostModel backed by a remote process. Inputs must carry `ref`, which is
// forwarded verbatim as RUN's input_ref. Calls are serialized.
class ExchangeHost : public HostModel {
 public:
  explicit ExchangeHost(std::unique_ptr<FdChannel> channel) : owned_(std::move(channel)), ch_(owned_.get()) { hello(); }
  explicit ExchangeHost(std::unique_ptr<Subprocess> proc) : proc_(std::move(proc)), ch_(&proc_->channel()) { hello(); }

  std::size_t d_model() const override { return d_l_; }
  std::size_t vocab_size() const override { return vocab_; }
  std::size_t image_tokens() const { return T_; }

  // The ref with the input's text ids folded in, so sequences grown during
  // generation reach the remote side.
  static std::string effective_ref(const HostInput& in) {
    if (in.text.empty()) return in.ref;
    json j = json::parse(in.ref, nullptr, false);
    if (!j.is_object()) return in.ref;
    j.erase("text");
    j["text_ids"] = in.text;
    return j.dump();
  }

  std::vector<TokenRange> token_ranges(const HostInput& in) const override {
    const auto ref = effective_ref(in);
    {
      std::lock_guard lock(mu_);
      const auto it = ranges_.find(ref);
      if (it != ranges_.end()) return it->second;
    }
    run(in);
    std::lock_guard lock(mu_);
    return ranges_.at(ref);
  }

 protected:
  Matrix<float> do_run(const HostInput& in) const override {
    require(!in.ref.empty(), "exchange host: input has no ref");
    const auto ref = effective_ref(in);
    std::lock_guard lock(mu_);
    send(*ch_, {{"type", "RUN"}, {"input_ref", ref}});
    const auto m = expect("ACT");
    const auto x = block_matrix(m);
    std::vector<TokenRange> ranges;
    for (const auto& r : m.header.value("ranges", json::array()))
      ranges.push_back({r.at("label").get<std::string>(), r.at("begin").get<std::size_t>(), r.at("end").get<std::size_t>()});
    ranges_[ref] = std::move(ranges);
    return x.cast<float>();
  }

  std::vector<double> do_complete(const Matrix<double>& xhat) const override {
    std::lock_guard lock(mu_);
    send(*ch_, {{"type", "COMPLETE"}, {"rows", xhat.rows()}, {"cols", xhat.cols()}},
         pack_f32(std::span<const double>(xhat.data())));
    const auto m = expect("LOGITS");
    const auto f = unpack_f32(m.block);
    return {f.begin(), f.end()};
  }

  Matrix<double> do_vjp(const Matrix<double>& xhat, std::uint32_t v_c, std::uint32_t v_b) const override {
    std::lock_guard lock(mu_);
    send(*ch_, {{"type", "VJP"}, {"v_c", v_c}, {"v_b", v_b}, {"rows", xhat.rows()}, {"cols", xhat.cols()}},
         pack_f32(std::span<const double>(xhat.data())));
    return block_matrix(expect("GRAD"));
  }

 private:
  void hello() {
    send(*ch_, {{"type", "HELLO"}});
    const auto m = expect("HELLO");
    d_l_ = m.header.at("d_l").get<std::size_t>();
    T_ = m.header.at("T").get<std::size_t>();
    vocab_ = m.header.at("vocab").get<std::size_t>();
  }

  Message expect(const std::string& type) const {
    auto m = receive(*ch_);
    if (!m) throw ClientError("exchange: host closed the connection");
    const auto got = m->header.at("type").get<std::string>();
    if (got == "ERROR") throw ClientError("exchange host error: " + m->header.value("message", std::string("?")));
    if (got != type) throw ParseError("exchange: expected " + type + ", got " + got);
    return std::move(*m);
  }

  std::unique_ptr<Subprocess> proc_;
  std::unique_ptr<FdChannel> owned_;
  FdChannel* ch_;
  std::size_t d_l_ = 0, T_ = 0, vocab_ = 0;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::vector<TokenRange>> ranges_;
};

}  // namespace msae::exchange
