#pragma once

// Judge adapters. The external protocol is one JSON object per line:
//   request {"id", "prompt", "completion", "rubric"}
//   reply   {"id", "s_reason", "s_answer", "s_follow", "s_overall"}
// over a subprocess's stdin/stdout, or as an HTTP POST body.

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace seqcond {

struct JudgeScore {
    double s_reason = 1.0;   // 1..5
    double s_answer = 1.0;   // 1..5
    double s_follow = 1.0;   // 1..5
    double s_overall = 0.0;  // 0..100
    bool overlong = false;

    void validate() const;
};

struct JudgeRequest {
    std::string id;
    std::string prompt;
    std::string completion;
    std::string rubric;
    // ground truth from the task verifier; only the stub reads these
    bool correct = false;
    bool well_formatted = false;
    bool overlong = false;
};

class Judge {
public:
    virtual ~Judge() = default;
    // nullopt when the judge failed after all retries
    virtual std::optional<JudgeScore> score(const JudgeRequest& req) = 0;
    const std::vector<std::string>& log() const { return log_; }

protected:
    std::vector<std::string> log_;
};

// Deterministic scores from the verifier verdict and format.
class StubJudge : public Judge {
public:
    std::optional<JudgeScore> score(const JudgeRequest& req) override;
};

struct ExternalJudgeOptions {
    double timeout_seconds = 30.0;
    int retries = 2;
};

// Parses and validates one reply line; nullopt (with reason) when malformed.
std::optional<JudgeScore> parse_judge_reply(const std::string& line, const std::string& expected_id,
                                            std::string* reason = nullptr);
std::string format_judge_request(const JudgeRequest& req);

class SubprocessJudge : public Judge {
public:
    SubprocessJudge(std::string command, ExternalJudgeOptions opts = {});
    ~SubprocessJudge() override;
    SubprocessJudge(const SubprocessJudge&) = delete;
    SubprocessJudge& operator=(const SubprocessJudge&) = delete;

    std::optional<JudgeScore> score(const JudgeRequest& req) override;
    int restarts() const { return restarts_; }

private:
    void start();
    void stop();
    // one exchange; empty optional on timeout or EOF
    std::optional<std::string> exchange(const std::string& line);

    std::string command_;
    ExternalJudgeOptions opts_;
    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::string pending_;
    int restarts_ = 0;
};

class HttpJudge : public Judge {
public:
    HttpJudge(std::string host, int port, std::string path = "/judge", ExternalJudgeOptions opts = {});
    std::optional<JudgeScore> score(const JudgeRequest& req) override;

private:
    std::string host_;
    int port_;
    std::string path_;
    ExternalJudgeOptions opts_;
};

// "stub", "subprocess:<command>" or "http://host:port/path"
std::unique_ptr<Judge> make_judge(const std::string& spec, ExternalJudgeOptions opts = {});

}  // namespace seqcond
