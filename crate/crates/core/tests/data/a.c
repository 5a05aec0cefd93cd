struct rule { int move; int flag; };
int board_size = 19;
int komi = 5;
struct rule rules[3] = {{1,0},{2,0},{3,0}};
int counter;
static int helper(int *p, int n) { int s = 0; for (int k = 0; k < n; k++) s += p[k]; return s; }
void discard_moves(int user_f) {
  int i;
  for (i = 0; i <= 2; i++) {
    if (rules[i].move != user_f) rules[i].flag = 1;
    user_f = user_f + 1;
  }
  counter = rules[2].move;
}
int main(void) { int arr[4] = {1,2,3,4}; char buf[10]; buf[0]=1; discard_moves(3); return helper(arr, 4) + buf[0]; }
void _start(void) { main(); for(;;); }
