#include "seqcond/judge.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>

#include "httplib.h"
#include "json.hpp"
#include "seqcond/errors.hpp"

namespace seqcond {

using json = nlohmann::json;

void JudgeScore::validate() const {
    auto crit = [](double v, const char* name) {
        if (!std::isfinite(v) || v < 1.0 || v > 5.0)
            throw InputError(std::string("judge score ") + name + " must lie in [1, 5]");
    };
    crit(s_reason, "s_reason");
    crit(s_answer, "s_answer");
    crit(s_follow, "s_follow");
    if (!std::isfinite(s_overall) || s_overall < 0.0 || s_overall > 100.0)
        throw InputError("judge score s_overall must lie in [0, 100]");
}

std::optional<JudgeScore> StubJudge::score(const JudgeRequest& req) {
    JudgeScore s;
    s.s_answer = req.correct ? 5.0 : 1.0;
    s.s_follow = req.well_formatted ? 5.0 : 2.0;
    s.s_reason = req.correct ? (req.well_formatted ? 5.0 : 4.0) : 2.0;
    s.s_overall = (req.correct ? 60.0 : 0.0) + (req.well_formatted ? 40.0 : 0.0);
    s.overlong = req.overlong;
    return s;
}

std::string format_judge_request(const JudgeRequest& req) {
    return json{{"id", req.id}, {"prompt", req.prompt}, {"completion", req.completion}, {"rubric", req.rubric}}.dump();
}

std::optional<JudgeScore> parse_judge_reply(const std::string& line, const std::string& expected_id,
                                            std::string* reason) {
    auto fail = [&](const std::string& why) -> std::optional<JudgeScore> {
        if (reason) *reason = why;
        return std::nullopt;
    };
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return fail("reply is not a JSON object");
    if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>() != expected_id)
        return fail("reply id does not match request");
    JudgeScore s;
    for (auto [key, dst] : {std::pair{"s_reason", &s.s_reason}, std::pair{"s_answer", &s.s_answer},
                            std::pair{"s_follow", &s.s_follow}, std::pair{"s_overall", &s.s_overall}}) {
        if (!j.contains(key) || !j[key].is_number()) return fail(std::string("missing numeric field ") + key);
        *dst = j[key].get<double>();
    }
    try {
        s.validate();
    } catch (const InputError& e) {
        return fail(e.what());
    }
    return s;
}

SubprocessJudge::SubprocessJudge(std::string command, ExternalJudgeOptions opts)
    : command_(std::move(command)), opts_(opts) {
    if (command_.empty()) throw InputError("subprocess judge: empty command");
    if (!(opts_.timeout_seconds > 0.0) || opts_.retries < 0) throw InputError("subprocess judge: bad timeout/retries");
    ::signal(SIGPIPE, SIG_IGN);
}

SubprocessJudge::~SubprocessJudge() { stop(); }

void SubprocessJudge::start() {
    int in[2], out[2];
    if (::pipe(in) != 0) throw IoError("subprocess judge: pipe failed");
    if (::pipe(out) != 0) {
        ::close(in[0]);
        ::close(in[1]);
        throw IoError("subprocess judge: pipe failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw IoError("subprocess judge: fork failed");
    if (pid == 0) {
        ::dup2(in[0], STDIN_FILENO);
        ::dup2(out[1], STDOUT_FILENO);
        ::close(in[0]);
        ::close(in[1]);
        ::close(out[0]);
        ::close(out[1]);
        ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(in[0]);
    ::close(out[1]);
    ::fcntl(in[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(out[0], F_SETFD, FD_CLOEXEC);
    pid_ = pid;
    to_child_ = in[1];
    from_child_ = out[0];
    pending_.clear();
}

void SubprocessJudge::stop() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, nullptr, 0);
    }
    pid_ = -1;
    pending_.clear();
}

std::optional<std::string> SubprocessJudge::exchange(const std::string& line) {
    if (pid_ < 0) start();
    const std::string msg = line + "\n";
    std::size_t off = 0;
    while (off < msg.size()) {
        const ssize_t n = ::write(to_child_, msg.data() + off, msg.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            return std::nullopt;
        }
        off += std::size_t(n);
    }
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + std::chrono::duration<double>(opts_.timeout_seconds);
    for (;;) {
        const auto nl = pending_.find('\n');
        if (nl != std::string::npos) {
            std::string reply = pending_.substr(0, nl);
            pending_.erase(0, nl + 1);
            return reply;
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
        if (left <= 0) return std::nullopt;
        pollfd pfd{from_child_, POLLIN, 0};
        const int r = ::poll(&pfd, 1, int(left));
        if (r < 0 && errno == EINTR) continue;
        if (r <= 0) return std::nullopt;
        char buf[4096];
        const ssize_t n = ::read(from_child_, buf, sizeof buf);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return std::nullopt;
        pending_.append(buf, std::size_t(n));
    }
}

std::optional<JudgeScore> SubprocessJudge::score(const JudgeRequest& req) {
    const std::string line = format_judge_request(req);
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
        auto reply = exchange(line);
        if (!reply) {
            log_.push_back("judge request " + req.id + " attempt " + std::to_string(attempt + 1) +
                           ": timeout or closed pipe; restarting judge process");
            stop();
            ++restarts_;
            continue;
        }
        std::string why;
        if (auto s = parse_judge_reply(*reply, req.id, &why)) {
            s->overlong = req.overlong;
            return s;
        }
        log_.push_back("judge request " + req.id + " attempt " + std::to_string(attempt + 1) + ": malformed reply (" +
                       why + ")");
    }
    return std::nullopt;
}

HttpJudge::HttpJudge(std::string host, int port, std::string path, ExternalJudgeOptions opts)
    : host_(std::move(host)), port_(port), path_(std::move(path)), opts_(opts) {
    if (host_.empty() || port_ <= 0) throw InputError("http judge: bad host or port");
}

std::optional<JudgeScore> HttpJudge::score(const JudgeRequest& req) {
    httplib::Client cli(host_, port_);
    const auto secs = std::chrono::duration<double>(opts_.timeout_seconds);
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(secs);
    cli.set_connection_timeout(us);
    cli.set_read_timeout(us);
    cli.set_write_timeout(us);
    const std::string body = format_judge_request(req);
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
        auto res = cli.Post(path_, body, "application/json");
        const std::string tag = "judge request " + req.id + " attempt " + std::to_string(attempt + 1);
        if (!res) {
            log_.push_back(tag + ": http error " + httplib::to_string(res.error()));
            continue;
        }
        if (res->status != 200) {
            log_.push_back(tag + ": http status " + std::to_string(res->status));
            continue;
        }
        std::string why;
        std::string line = res->body;
        while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
        if (auto s = parse_judge_reply(line, req.id, &why)) {
            s->overlong = req.overlong;
            return s;
        }
        log_.push_back(tag + ": malformed reply (" + why + ")");
    }
    return std::nullopt;
}

std::unique_ptr<Judge> make_judge(const std::string& spec, ExternalJudgeOptions opts) {
    if (spec == "stub") return std::make_unique<StubJudge>();
    if (spec.rfind("subprocess:", 0) == 0) return std::make_unique<SubprocessJudge>(spec.substr(11), opts);
    if (spec.rfind("http://", 0) == 0) {
        const std::string rest = spec.substr(7);
        const auto slash = rest.find('/');
        const std::string hostport = rest.substr(0, slash);
        const std::string path = slash == std::string::npos ? "/judge" : rest.substr(slash);
        const auto colon = hostport.rfind(':');
        if (colon == std::string::npos) throw InputError("http judge spec needs host:port");
        int port = 0;
        try {
            port = std::stoi(hostport.substr(colon + 1));
        } catch (const std::exception&) {
            throw InputError("http judge spec has a bad port");
        }
        return std::make_unique<HttpJudge>(hostport.substr(0, colon), port, path, opts);
    }
    throw InputError("unknown judge '" + spec + "' (expected stub, subprocess:<cmd> or http://host:port/path)");
}

}  // namespace seqcond
